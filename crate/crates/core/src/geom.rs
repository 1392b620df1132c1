//! Point-cloud value type and the geometric primitives used by every stage.

use std::f64::consts::TAU;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

pub type Point = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("k = {k} is outside 1..={m}")]
    BadK { k: usize, m: usize },
    #[error("target count must be at least 1")]
    BadTarget,
}

/// Class index in `[0, N)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn checked(id: usize, num_classes: usize) -> Option<Self> {
        (id < num_classes).then_some(ClassId(id))
    }
}

/// An unordered set of 3-D points with an optional class label.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<ClassId>,
}

/// Result of [`normalize`]; `degenerate` is set when every point coincided
/// and the cloud collapsed onto the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub cloud: PointCloud,
    pub degenerate: bool,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, label: None }
    }

    pub fn with_label(mut self, label: ClassId) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the value-type invariants: non-empty, all coordinates finite.
    pub fn validate(&self) -> Result<(), GeomError> {
        if self.points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        match self.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            Some(index) => Err(GeomError::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Keeps the points whose indices are listed, in the listed order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
        }
    }

    /// Keeps the points where `mask` is set, preserving order.
    pub fn retain_mask(&self, mask: &[bool]) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .zip(mask)
                .filter_map(|(p, &keep)| keep.then_some(*p))
                .collect(),
            label: self.label,
        }
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }
}

pub fn norm(p: &Point) -> f64 {
    dot(p, p).sqrt()
}

pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Point, b: &Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dist_sq(a: &Point, b: &Point) -> f64 {
    let d = sub(a, b);
    dot(&d, &d)
}

/// Centers the cloud on its centroid and scales it into the unit ball.
pub fn normalize(cloud: &PointCloud) -> Result<Normalized, GeomError> {
    cloud.validate()?;
    let c = cloud.centroid();
    let centered: Vec<Point> = cloud.points.iter().map(|p| sub(p, &c)).collect();
    let scale = centered.iter().map(norm).fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_normal() {
        log::warn!("normalize: all {} points coincide", cloud.len());
        return Ok(Normalized {
            cloud: PointCloud { points: vec![[0.0; 3]; cloud.len()], label: cloud.label },
            degenerate: true,
        });
    }
    Ok(Normalized {
        cloud: PointCloud {
            points: centered.iter().map(|p| p.map(|v| v / scale)).collect(),
            label: cloud.label,
        },
        degenerate: false,
    })
}

/// Rotates every point about the z axis by `angle` radians.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|&[x, y, z]| [x * c - y * s, x * s + y * c, z])
            .collect(),
        label: cloud.label,
    }
}

/// Uniform angle in `[0, 2π)`.
pub fn random_angle(rng: &mut Rng) -> f64 {
    rng.gen::<f64>() * TAU
}

/// Source indices chosen by [`downsample`].
///
/// With `M ≥ target` this is a uniform draw without replacement (partial
/// Fisher-Yates); otherwise all `M` indices followed by `target − M` draws
/// with replacement.
pub fn downsample_indices(m: usize, target: usize, rng: &mut Rng) -> Result<Vec<usize>, GeomError> {
    if m == 0 {
        return Err(GeomError::EmptyCloud);
    }
    if target == 0 {
        return Err(GeomError::BadTarget);
    }
    if m >= target {
        let mut idx: Vec<usize> = (0..m).collect();
        for i in 0..target {
            let j = i + rng.gen_range(0..(m - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(target);
        Ok(idx)
    } else {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.extend((m..target).map(|_| rng.gen_range(0..m as u64) as usize));
        Ok(idx)
    }
}

/// Resamples the cloud to exactly `target` points.
pub fn downsample(cloud: &PointCloud, target: usize, rng: &mut Rng) -> Result<PointCloud, GeomError> {
    let idx = downsample_indices(cloud.len(), target, rng)?;
    Ok(cloud.select(&idx))
}

/// Indices of the `k` points nearest to `query`, nearest first, ties broken
/// by the lower index. Brute force.
pub fn knn_indices(cloud: &PointCloud, query: &Point, k: usize) -> Result<Vec<usize>, GeomError> {
    let m = cloud.len();
    if k < 1 || k > m {
        return Err(GeomError::BadK { k, m });
    }
    let mut keyed: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist_sq(p, query), i))
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < m {
        keyed.select_nth_unstable_by(k - 1, by_key);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(by_key);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}
