//! Orthographic depth rendering of a point cloud from a fixed set of views.
//!
//! Conventions (frozen; golden images depend on them):
//!
//! * A view looks along its unit `direction` `d`; depth is `t = p·d`, so the
//!   point with the smallest `t` is closest to the viewer.
//! * `(right, up, direction)` is a right-handed orthonormal triad
//!   (`right × up = direction`).
//! * Views with a horizontal component use `up` = the projection of `+z`
//!   onto the image plane and `right = up × direction`.
//! * `+z` uses `right = +x, up = +y`; `−z` uses `right = +x, up = −y`.
//! * Pixel `(row, col)`: `col = round((a + 1)/2 · (R − 1))`,
//!   `row = round((1 − b)/2 · (R − 1))` with `a = p·right`, `b = p·up`,
//!   rounding half away from zero, row 0 at the top.
//! * Pixel value `1 − (t_near + 1)/2`; empty pixels are exactly 0.
//!
//! `Orthogonal6` order is `+x, −x, +y, −y, +z, −z`, named
//! right, left, front, back, top, bottom.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{cross, dot, norm, Point, PointCloud};

const SLAB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectError {
    #[error("point {index} lies outside the [-1, 1] slab of view {view} (coordinate {value})")]
    CloudOutOfSlab { index: usize, view: usize, value: f64 },
    #[error("resolution {0} is below the minimum of 16")]
    BadResolution(usize),
    #[error("unknown view set {0:?}")]
    UnknownViewSet(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ViewSetKind {
    #[default]
    Orthogonal6,
    Cube8,
    Clock14,
    CubePlus14,
}

impl ViewSetKind {
    pub fn num_views(self) -> usize {
        match self {
            ViewSetKind::Orthogonal6 => 6,
            ViewSetKind::Cube8 => 8,
            ViewSetKind::Clock14 | ViewSetKind::CubePlus14 => 14,
        }
    }

    /// Short name used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            ViewSetKind::Orthogonal6 => "6",
            ViewSetKind::Cube8 => "8",
            ViewSetKind::Clock14 => "14clock",
            ViewSetKind::CubePlus14 => "14cube",
        }
    }
}

impl fmt::Display for ViewSetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for ViewSetKind {
    type Err = ProjectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "6" => Ok(ViewSetKind::Orthogonal6),
            "8" => Ok(ViewSetKind::Cube8),
            "14clock" => Ok(ViewSetKind::Clock14),
            "14cube" => Ok(ViewSetKind::CubePlus14),
            other => Err(ProjectError::UnknownViewSet(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub direction: Point,
    pub right: Point,
    pub up: Point,
}

impl View {
    fn looking_along(name: impl Into<String>, direction: Point) -> View {
        let n = norm(&direction);
        let d = direction.map(|v| v / n);
        let (right, up) = if d[0] == 0.0 && d[1] == 0.0 {
            let up = if d[2] > 0.0 { [0.0, 1.0, 0.0] } else { [0.0, -1.0, 0.0] };
            ([1.0, 0.0, 0.0], up)
        } else {
            let z = [0.0, 0.0, 1.0];
            let along = dot(&z, &d);
            let raw = [-along * d[0], -along * d[1], 1.0 - along * d[2]];
            let l = norm(&raw);
            let up = raw.map(|v| v / l);
            (cross(&up, &d), up)
        };
        View { name: name.into(), direction: d, right, up }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub kind: ViewSetKind,
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

fn orthogonal6() -> Vec<View> {
    vec![
        View::looking_along("right", [1.0, 0.0, 0.0]),
        View::looking_along("left", [-1.0, 0.0, 0.0]),
        View::looking_along("front", [0.0, 1.0, 0.0]),
        View::looking_along("back", [0.0, -1.0, 0.0]),
        View::looking_along("top", [0.0, 0.0, 1.0]),
        View::looking_along("bottom", [0.0, 0.0, -1.0]),
    ]
}

fn cube8() -> Vec<View> {
    let mut views = Vec::with_capacity(8);
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            for sz in [1.0, -1.0] {
                let sign = |s: f64| if s > 0.0 { '+' } else { '-' };
                views.push(View::looking_along(
                    format!("corner{}{}{}", sign(sx), sign(sy), sign(sz)),
                    [sx, sy, sz],
                ));
            }
        }
    }
    views
}

fn clock14() -> Vec<View> {
    let mut views: Vec<View> = (0..12)
        .map(|k| {
            let a = (30 * k) as f64 * std::f64::consts::PI / 180.0;
            View::looking_along(format!("azimuth{:03}", 30 * k), [a.cos(), a.sin(), 0.0])
        })
        .collect();
    views.push(View::looking_along("top", [0.0, 0.0, 1.0]));
    views.push(View::looking_along("bottom", [0.0, 0.0, -1.0]));
    views
}

/// Canonical view list for `kind`.
pub fn view_basis(kind: ViewSetKind) -> ViewSet {
    let views = match kind {
        ViewSetKind::Orthogonal6 => orthogonal6(),
        ViewSetKind::Cube8 => cube8(),
        ViewSetKind::Clock14 => clock14(),
        ViewSetKind::CubePlus14 => {
            let mut v = orthogonal6();
            v.extend(cube8());
            v
        }
    };
    ViewSet { kind, views }
}

/// `V × 1 × R × R` depth images, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImageStack {
    pub kind: ViewSetKind,
    pub resolution: usize,
    pub data: Vec<f32>,
}

impl DepthImageStack {
    pub fn num_views(&self) -> usize {
        self.kind.num_views()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.num_views(), 1, self.resolution, self.resolution]
    }

    pub fn image(&self, view: usize) -> &[f32] {
        let px = self.resolution * self.resolution;
        &self.data[view * px..(view + 1) * px]
    }

    pub fn pixel(&self, view: usize, row: usize, col: usize) -> f32 {
        self.image(view)[row * self.resolution + col]
    }

    /// 8-bit binary PGM (P5, maxval 255) of one view.
    pub fn to_pgm(&self, view: usize) -> Vec<u8> {
        let r = self.resolution;
        let mut out = format!("P5\n{r} {r}\n255\n").into_bytes();
        out.extend(self.image(view).iter().map(|&v| (255.0 * v as f64).round().clamp(0.0, 255.0) as u8));
        out
    }
}

fn pixel_index(coord: f64, r: usize) -> usize {
    ((coord + 1.0) / 2.0 * (r - 1) as f64).round() as usize
}

/// Renders `cloud` from each view of `kind`; nearest point per pixel wins.
pub fn project(cloud: &PointCloud, kind: ViewSetKind, resolution: usize) -> Result<DepthImageStack, ProjectError> {
    if resolution < 16 {
        return Err(ProjectError::BadResolution(resolution));
    }
    let views = view_basis(kind);
    let px = resolution * resolution;
    let mut data = vec![0f32; views.len() * px];
    let mut nearest = vec![f64::INFINITY; px];
    for (vi, view) in views.views.iter().enumerate() {
        nearest.iter_mut().for_each(|t| *t = f64::INFINITY);
        for (index, p) in cloud.points.iter().enumerate() {
            let mut coords = [dot(p, &view.right), dot(p, &view.up), dot(p, &view.direction)];
            for c in coords.iter_mut() {
                if c.abs() > 1.0 + SLAB_TOLERANCE || !c.is_finite() {
                    return Err(ProjectError::CloudOutOfSlab { index, view: vi, value: *c });
                }
                *c = c.clamp(-1.0, 1.0);
            }
            let [a, b, t] = coords;
            let col = pixel_index(a, resolution);
            let row = pixel_index(-b, resolution);
            let slot = &mut nearest[row * resolution + col];
            if t < *slot {
                *slot = t;
            }
        }
        let image = &mut data[vi * px..(vi + 1) * px];
        for (out, &t) in image.iter_mut().zip(&nearest) {
            if t.is_finite() {
                *out = (1.0 - (t + 1.0) / 2.0) as f32;
            }
        }
    }
    Ok(DepthImageStack { kind, resolution, data })
}
