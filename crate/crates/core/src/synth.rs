//! Synthetic shape datasets: clean source clouds sampled from primitive
//! surfaces and a deformed target set with occlusion and density defects
//! outside the training augmentation grid.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_density, apply_hole, AugmentError};
use crate::geom::{normalize, random_angle, rotate_z, GeomError, Point, PointCloud};
use crate::io::{write_cloud, CloudFormat, DatasetManifest, DomainRole, FormatError, ManifestEntry, Split};
use crate::rng::{stream, Rng};

/// Hole rate applied to deformed target clouds.
pub const TARGET_HOLE_RATE: f64 = 0.5;
/// Density exponent applied to deformed target clouds.
pub const TARGET_DENSITY_EXPONENT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid shape spec: {0}")]
    BadSpec(String),
    #[error("need between 2 and {max} classes, got {got}")]
    BadClassCount { got: usize, max: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] =
        [ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Cylinder, ShapeFamily::Cone, ShapeFamily::Torus, ShapeFamily::Pyramid];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Pyramid => "pyramid",
        }
    }

    /// Draws per-sample size parameters for this family.
    pub fn random_spec(self, samples: usize, jitter: f64, rng: &mut Rng) -> SyntheticShapeSpec {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let dims = match self {
            ShapeFamily::Sphere => [u(0.8, 1.2), 0.0, 0.0],
            ShapeFamily::Box => [u(0.5, 1.5), u(0.5, 1.5), u(0.5, 1.5)],
            ShapeFamily::Cylinder => [u(0.3, 0.7), u(0.8, 2.0), 0.0],
            ShapeFamily::Cone => [u(0.4, 0.8), u(0.8, 1.8), 0.0],
            ShapeFamily::Torus => [u(0.6, 0.9), u(0.15, 0.35), 0.0],
            ShapeFamily::Pyramid => [u(0.8, 1.6), u(0.6, 1.6), 0.0],
        };
        SyntheticShapeSpec { family: self, dims, samples, jitter }
    }
}

/// One primitive surface. `dims` by family: sphere `[radius]`; box
/// `[x, y, z]` side lengths; cylinder and cone `[radius, height]`; torus
/// `[major, minor]` radii; pyramid `[base side, height]`. Unused slots are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeSpec {
    pub family: ShapeFamily,
    pub dims: [f64; 3],
    pub samples: usize,
    pub jitter: f64,
}

impl SyntheticShapeSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.samples < 256 {
            return Err(SynthError::BadSpec(format!("sample count {} below 256", self.samples)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(SynthError::BadSpec(format!("jitter {} must be finite and non-negative", self.jitter)));
        }
        let used = match self.family {
            ShapeFamily::Sphere => 1,
            ShapeFamily::Box => 3,
            _ => 2,
        };
        if self.dims[..used].iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(SynthError::BadSpec(format!("{:?} needs positive dims, got {:?}", self.family, self.dims)));
        }
        if self.family == ShapeFamily::Torus && self.dims[1] >= self.dims[0] {
            return Err(SynthError::BadSpec("torus minor radius must be below the major radius".into()));
        }
        Ok(())
    }

    /// Uniform surface samples before jitter and normalization.
    pub fn sample_surface(&self, rng: &mut Rng) -> Result<Vec<Point>, SynthError> {
        self.validate()?;
        let n = self.samples;
        let [a, b, c] = self.dims;
        let pts = match self.family {
            ShapeFamily::Sphere => (0..n).map(|_| scale(unit_vector(rng), a)).collect(),
            ShapeFamily::Box => sample_box(a, b, c, n, rng),
            ShapeFamily::Cylinder => sample_cylinder(a, b, n, rng),
            ShapeFamily::Cone => sample_cone(a, b, n, rng),
            ShapeFamily::Torus => sample_torus(a, b, n, rng),
            ShapeFamily::Pyramid => sample_pyramid(a, b, n, rng),
        };
        Ok(pts)
    }

    /// Surface samples with Gaussian jitter, normalized to the unit ball.
    pub fn generate(&self, rng: &mut Rng) -> Result<PointCloud, SynthError> {
        let mut pts = self.sample_surface(rng)?;
        if self.jitter > 0.0 {
            let noise = Normal::new(0.0, self.jitter).expect("validated jitter");
            for p in &mut pts {
                for x in p.iter_mut() {
                    *x += noise.sample(rng);
                }
            }
        }
        Ok(normalize(&PointCloud::new(pts))?.cloud)
    }
}

fn scale(p: Point, s: f64) -> Point {
    [p[0] * s, p[1] * s, p[2] * s]
}

fn unit_vector(rng: &mut Rng) -> Point {
    loop {
        let v: Point = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Index of the patch containing a uniform draw over cumulative areas.
fn pick_patch(areas: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = areas.iter().sum();
    let mut t = rng.gen::<f64>() * total;
    for (i, &a) in areas.iter().enumerate() {
        if t < a {
            return i;
        }
        t -= a;
    }
    areas.len() - 1
}

/// Face order: −x, +x, −y, +y, −z, +z.
pub fn box_face_areas(a: f64, b: f64, c: f64) -> [f64; 6] {
    [b * c, b * c, a * c, a * c, a * b, a * b]
}

/// Face of a point on an axis-aligned box surface, in [`box_face_areas`] order.
pub fn box_face_of(p: &Point, a: f64, b: f64, c: f64) -> usize {
    let half = [a / 2.0, b / 2.0, c / 2.0];
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for axis in 0..3 {
        let gap = (p[axis].abs() - half[axis]).abs();
        if gap < best_gap {
            best_gap = gap;
            best = 2 * axis + usize::from(p[axis] > 0.0);
        }
    }
    best
}

fn sample_box(a: f64, b: f64, c: f64, n: usize, rng: &mut Rng) -> Vec<Point> {
    let areas = box_face_areas(a, b, c);
    let half = [a / 2.0, b / 2.0, c / 2.0];
    (0..n)
        .map(|_| {
            let face = pick_patch(&areas, rng);
            let axis = face / 2;
            let mut p = [0.0; 3];
            for (k, slot) in p.iter_mut().enumerate() {
                *slot = if k == axis {
                    if face % 2 == 1 { half[k] } else { -half[k] }
                } else {
                    rng.gen_range(-half[k]..half[k])
                };
            }
            p
        })
        .collect()
}

/// Uniform point on a disk of radius `r` at height `z`.
fn disk_point(r: f64, z: f64, rng: &mut Rng) -> Point {
    let rad = r * rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..2.0 * PI);
    [rad * t.cos(), rad * t.sin(), z]
}

fn sample_cylinder(r: f64, h: f64, n: usize, rng: &mut Rng) -> Vec<Point> {
    let areas = [2.0 * PI * r * h, PI * r * r, PI * r * r];
    (0..n)
        .map(|_| match pick_patch(&areas, rng) {
            0 => {
                let t = rng.gen_range(0.0..2.0 * PI);
                [r * t.cos(), r * t.sin(), rng.gen_range(-h / 2.0..h / 2.0)]
            }
            1 => disk_point(r, -h / 2.0, rng),
            _ => disk_point(r, h / 2.0, rng),
        })
        .collect()
}

fn sample_cone(r: f64, h: f64, n: usize, rng: &mut Rng) -> Vec<Point> {
    let slant = (r * r + h * h).sqrt();
    let areas = [PI * r * slant, PI * r * r];
    (0..n)
        .map(|_| match pick_patch(&areas, rng) {
            0 => {
                // Lateral area grows linearly with distance from the apex.
                let s = rng.gen::<f64>().sqrt();
                let t = rng.gen_range(0.0..2.0 * PI);
                [r * s * t.cos(), r * s * t.sin(), h / 2.0 - s * h]
            }
            _ => disk_point(r, -h / 2.0, rng),
        })
        .collect()
}

fn sample_torus(big: f64, small: f64, n: usize, rng: &mut Rng) -> Vec<Point> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = rng.gen_range(0.0..2.0 * PI);
        let v = rng.gen_range(0.0..2.0 * PI);
        // Area element is proportional to the distance from the axis.
        let ring = big + small * v.cos();
        if rng.gen::<f64>() * (big + small) > ring {
            continue;
        }
        out.push([ring * u.cos(), ring * u.sin(), small * v.sin()]);
    }
    out
}

fn triangle_point(a: &Point, b: &Point, c: &Point, rng: &mut Rng) -> Point {
    let s = rng.gen::<f64>().sqrt();
    let t = rng.gen::<f64>();
    let (wa, wb, wc) = (1.0 - s, s * (1.0 - t), s * t);
    [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
}

fn sample_pyramid(side: f64, h: f64, n: usize, rng: &mut Rng) -> Vec<Point> {
    let s = side / 2.0;
    let apex = [0.0, 0.0, h / 2.0];
    let base = [[-s, -s, -h / 2.0], [s, -s, -h / 2.0], [s, s, -h / 2.0], [-s, s, -h / 2.0]];
    let face = 0.5 * side * (h * h + s * s).sqrt();
    let areas = [side * side, face, face, face, face];
    (0..n)
        .map(|_| match pick_patch(&areas, rng) {
            0 => [rng.gen_range(-s..s), rng.gen_range(-s..s), -h / 2.0],
            k => triangle_point(&apex, &base[k - 1], &base[k % 4], rng),
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Source training clouds per class.
    pub per_class: usize,
    /// Source validation clouds per class.
    pub val_per_class: usize,
    /// Deformed target clouds per class.
    pub target_per_class: usize,
    pub points: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { classes: 6, per_class: 200, val_per_class: 20, target_per_class: 100, points: 2048, jitter: 0.01, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
}

const SOURCE_DOMAIN: u64 = 1;
const TARGET_DOMAIN: u64 = 2;

/// Applies the target defect to a clean cloud: even indices get a hole at
/// [`TARGET_HOLE_RATE`], odd ones density loss at
/// [`TARGET_DENSITY_EXPONENT`]; then a random rotation about z.
pub fn deform_target(cloud: &PointCloud, index: usize, rng: &mut Rng) -> Result<PointCloud, SynthError> {
    let deformed = if index.is_multiple_of(2) {
        apply_hole(cloud, TARGET_HOLE_RATE, rng)?
    } else {
        apply_density(cloud, TARGET_DENSITY_EXPONENT, rng)?
    };
    Ok(rotate_z(&deformed, random_angle(rng)))
}

/// Writes `source/` and `target/` trees of pcb files plus one manifest each
/// under `out`. Every cloud draws from its own seeded stream.
pub fn generate_synthetic(config: &SynthConfig, out: &Path) -> Result<SynthOutput, SynthError> {
    if config.classes < 2 || config.classes > ShapeFamily::ALL.len() {
        return Err(SynthError::BadClassCount { got: config.classes, max: ShapeFamily::ALL.len() });
    }
    let families = &ShapeFamily::ALL[..config.classes];
    let classes: Vec<String> = families.iter().map(|f| f.name().to_string()).collect();

    let mut source = Vec::new();
    let mut target = Vec::new();
    for (ci, &family) in families.iter().enumerate() {
        for i in 0..config.per_class + config.val_per_class {
            let split = if i < config.per_class { Split::Train } else { Split::Test };
            let mut rng = stream(&[config.seed, SOURCE_DOMAIN, ci as u64, i as u64]);
            let cloud = family.random_spec(config.points, config.jitter, &mut rng).generate(&mut rng)?;
            let rel = format!("source/{}/{}_{i:04}.pcb", family.name(), family.name());
            save(out, &rel, &cloud)?;
            source.push(ManifestEntry { path: rel, class: family.name().into(), split });
        }
        for i in 0..config.target_per_class {
            let mut rng = stream(&[config.seed, TARGET_DOMAIN, ci as u64, i as u64]);
            let clean = family.random_spec(config.points, config.jitter, &mut rng).generate(&mut rng)?;
            let cloud = deform_target(&clean, i, &mut rng)?;
            let rel = format!("target/{}/{}_{i:04}.pcb", family.name(), family.name());
            save(out, &rel, &cloud)?;
            target.push(ManifestEntry { path: rel, class: family.name().into(), split: Split::Test });
        }
    }
    let source_manifest = out.join("source.json");
    let target_manifest = out.join("target.json");
    DatasetManifest { name: "synthetic-source".into(), role: DomainRole::Source, classes: classes.clone(), entries: source }
        .save(&source_manifest)?;
    DatasetManifest { name: "synthetic-target".into(), role: DomainRole::Target, classes, entries: target }.save(&target_manifest)?;
    Ok(SynthOutput { source_manifest, target_manifest })
}

fn save(root: &Path, rel: &str, cloud: &PointCloud) -> Result<(), SynthError> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| SynthError::Io { path: dir.to_path_buf(), source })?;
    }
    write_cloud(&path, cloud, CloudFormat::Pcb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::norm;
    use crate::rng::seeded;

    #[test]
    fn sphere_points_on_radius() {
        let spec = SyntheticShapeSpec { family: ShapeFamily::Sphere, dims: [0.7, 0.0, 0.0], samples: 1024, jitter: 0.0 };
        for p in spec.sample_surface(&mut seeded(3)).unwrap() {
            assert!((norm(&p) - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_guards() {
        let mut spec = SyntheticShapeSpec { family: ShapeFamily::Box, dims: [1.0, 1.0, 1.0], samples: 100, jitter: 0.0 };
        assert!(spec.validate().is_err());
        spec.samples = 256;
        spec.jitter = -1.0;
        assert!(spec.validate().is_err());
        let torus = SyntheticShapeSpec { family: ShapeFamily::Torus, dims: [0.5, 0.6, 0.0], samples: 256, jitter: 0.0 };
        assert!(torus.validate().is_err());
    }

    #[test]
    fn every_family_generates_normalized_clouds() {
        let mut rng = seeded(11);
        for f in ShapeFamily::ALL {
            let cloud = f.random_spec(512, 0.01, &mut rng).generate(&mut rng).unwrap();
            assert_eq!(cloud.len(), 512);
            assert!((cloud.max_norm() - 1.0).abs() < 1e-9, "{f:?}");
        }
    }

    #[test]
    fn torus_points_on_tube() {
        let spec = SyntheticShapeSpec { family: ShapeFamily::Torus, dims: [0.8, 0.2, 0.0], samples: 500, jitter: 0.0 };
        for p in spec.sample_surface(&mut seeded(5)).unwrap() {
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - 0.8;
            assert!((ring * ring + p[2] * p[2] - 0.04).abs() < 1e-9);
        }
    }
}
