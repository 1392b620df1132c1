//! Scan-defect simulation: occlusion holes and viewpoint-dependent density.
//!
//! A training sample is put into one of seven states: untouched, one of three
//! hole rates, or one of three density exponents. Both defects only ever
//! remove points; surviving coordinates are bit-for-bit copies of the input.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{dist_sq, knn_indices, GeomError, Point, PointCloud};
use crate::rng::Rng;

/// Hole drop rates of the transform grid.
pub const HOLE_RATES: [f64; 3] = [0.24, 0.36, 0.45];
/// Density exponents of the transform grid.
pub const DENSITY_EXPONENTS: [f64; 3] = [1.3, 1.4, 1.6];
/// Smallest keep probability any point gets under the density transform.
pub const KEEP_FLOOR: f64 = 0.1;
/// Neither transform may leave fewer points than this.
pub const MIN_POINTS: usize = 64;
const DENSITY_ATTEMPTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("transform would leave {remaining} points (minimum {MIN_POINTS})")]
    TooFewPoints { remaining: usize },
    #[error("need at least 2 points, got {0}")]
    CloudTooSmall(usize),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "lowercase")]
pub enum TransformSpec {
    Identity,
    /// Remove the `round(rate · M)` nearest neighbours of a random seed point.
    Hole(f64),
    /// Distance-dependent thinning with exponent `g`.
    Density(f64),
}

impl TransformSpec {
    /// The seven admissible states, in a fixed order.
    pub const ALL: [TransformSpec; 7] = [
        TransformSpec::Identity,
        TransformSpec::Hole(HOLE_RATES[0]),
        TransformSpec::Hole(HOLE_RATES[1]),
        TransformSpec::Hole(HOLE_RATES[2]),
        TransformSpec::Density(DENSITY_EXPONENTS[0]),
        TransformSpec::Density(DENSITY_EXPONENTS[1]),
        TransformSpec::Density(DENSITY_EXPONENTS[2]),
    ];

    /// Position in [`TransformSpec::ALL`], if this is one of the grid states.
    pub fn grid_index(&self) -> Option<usize> {
        Self::ALL.iter().position(|s| s == self)
    }

    pub fn apply(&self, cloud: &PointCloud, rng: &mut Rng) -> Result<PointCloud, AugmentError> {
        match *self {
            TransformSpec::Identity => Ok(cloud.clone()),
            TransformSpec::Hole(rate) => apply_hole(cloud, rate, rng),
            TransformSpec::Density(g) => apply_density(cloud, g, rng),
        }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::Identity => write!(f, "identity"),
            TransformSpec::Hole(r) => write!(f, "hole({r})"),
            TransformSpec::Density(g) => write!(f, "density({g})"),
        }
    }
}

/// Draws one of the seven states with equal probability.
pub fn sample_transform(rng: &mut Rng) -> TransformSpec {
    TransformSpec::ALL[rng.gen_range(0..7u32) as usize]
}

/// Number of points a hole of `rate` removes from `m` points
/// (round half away from zero).
pub fn hole_drop_count(m: usize, rate: f64) -> usize {
    (rate * m as f64).round() as usize
}

/// Removes the seed point and its nearest neighbours, `round(rate · M)` points
/// in total. Survivors keep their input order.
pub fn apply_hole(cloud: &PointCloud, rate: f64, rng: &mut Rng) -> Result<PointCloud, AugmentError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(AugmentError::BadParam(format!("hole rate {rate} not in (0, 1)")));
    }
    let m = cloud.len();
    if m < 2 {
        return Err(AugmentError::CloudTooSmall(m));
    }
    let k = hole_drop_count(m, rate);
    if k >= m || m - k < MIN_POINTS {
        return Err(AugmentError::TooFewPoints { remaining: m.saturating_sub(k) });
    }
    let seed = rng.gen_range(0..m as u64) as usize;
    let mut keep = vec![true; m];
    if k > 0 {
        for i in knn_indices(cloud, &cloud.points[seed], k)? {
            keep[i] = false;
        }
    }
    Ok(cloud.retain_mask(&keep))
}

/// `max(floor, (1 − s)^g)` for a normalized distance `s ∈ [0, 1]`.
pub fn density_keep_probability(s: f64, g: f64, floor: f64) -> f64 {
    (1.0 - s).max(0.0).powf(g).max(floor)
}

/// Uniform point on the unit sphere (area-uniform via `z ~ U[-1, 1]`).
pub fn random_unit_vector(rng: &mut Rng) -> Point {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Everything the density transform decided for one cloud.
#[derive(Clone, Debug)]
pub struct DensityDraw {
    pub viewpoint: Point,
    pub keep_probability: Vec<f64>,
    pub kept: Vec<bool>,
    /// Number of Bernoulli mask draws made (at most 8).
    pub attempts: usize,
    /// True when every attempt fell under the minimum and the most likely
    /// points were kept deterministically instead.
    pub fallback: bool,
    /// All points were equidistant from the viewpoint; everything is kept.
    pub degenerate: bool,
}

/// Draws the density-transform keep mask without materializing the cloud.
pub fn density_draw(cloud: &PointCloud, g: f64, rng: &mut Rng) -> Result<DensityDraw, AugmentError> {
    if !(g >= 1.0 && g.is_finite()) {
        return Err(AugmentError::BadParam(format!("density exponent {g} must be >= 1")));
    }
    let m = cloud.len();
    if m < 2 {
        return Err(AugmentError::CloudTooSmall(m));
    }
    let viewpoint = random_unit_vector(rng);
    let dist: Vec<f64> = cloud.points.iter().map(|p| dist_sq(p, &viewpoint).sqrt()).collect();
    let (lo, hi) = dist.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if hi <= lo {
        log::debug!("density transform: all points equidistant from the viewpoint");
        return Ok(DensityDraw {
            viewpoint,
            keep_probability: vec![1.0; m],
            kept: vec![true; m],
            attempts: 0,
            fallback: false,
            degenerate: true,
        });
    }
    let keep_probability: Vec<f64> = dist
        .iter()
        .map(|d| density_keep_probability((d - lo) / (hi - lo), g, KEEP_FLOOR))
        .collect();
    let required = MIN_POINTS.min(m);
    let mut kept = vec![false; m];
    for attempt in 1..=DENSITY_ATTEMPTS {
        let mut count = 0;
        for (slot, &p) in kept.iter_mut().zip(&keep_probability) {
            *slot = rng.gen::<f64>() < p;
            count += *slot as usize;
        }
        if count >= required {
            return Ok(DensityDraw { viewpoint, keep_probability, kept, attempts: attempt, fallback: false, degenerate: false });
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| keep_probability[b].total_cmp(&keep_probability[a]).then(a.cmp(&b)));
    kept.iter_mut().for_each(|k| *k = false);
    for &i in &order[..required] {
        kept[i] = true;
    }
    Ok(DensityDraw { viewpoint, keep_probability, kept, attempts: DENSITY_ATTEMPTS, fallback: true, degenerate: false })
}

/// Thins the cloud as seen from a random viewpoint on the unit sphere.
pub fn apply_density(cloud: &PointCloud, g: f64, rng: &mut Rng) -> Result<PointCloud, AugmentError> {
    let draw = density_draw(cloud, g, rng)?;
    Ok(cloud.retain_mask(&draw.kept))
}

/// Convenience wrapper used by the data pipeline: normalized input is
/// assumed and the output is not re-normalized.
pub fn apply(spec: TransformSpec, cloud: &PointCloud, rng: &mut Rng) -> Result<PointCloud, AugmentError> {
    spec.apply(cloud, rng)
}
