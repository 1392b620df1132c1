//! On-disk formats: point clouds, raw tensors, dataset manifests and model
//! checkpoints. Every binary format is little-endian.
//!
//! * `pcb`: `"PCDG"`, `u16` version 1, `u32` point count, then `count × 3`
//!   `f32` coordinates.
//! * `xyz`: text, one `x y z` line per point, 9 significant digits.
//! * raw tensor: `"TNSR"`, `u16` version 1, `u16` rank, `rank × u32` dims,
//!   then the `f32` row-major payload.
//! * checkpoint: `"MVCK"`, `u16` version 1, `u32` header length, a JSON
//!   header (config echo, metadata and a tensor directory of name, rank,
//!   dims and byte offset), then the concatenated `f32` payloads.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geom::{ClassId, PointCloud};
use crate::model::{DgMvp, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CLOUD_MAGIC: &[u8; 4] = b"PCDG";
const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("file truncated at byte {offset} (needed {needed} more bytes)")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("tensor rank must be at least 1")]
    BadRank,
    #[error("tensor dimensions {0:?} overflow the element count")]
    SizeOverflow(Vec<u64>),
    #[error("checkpoint config differs at `{field}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch { field: String, expected: String, found: String },
    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Little-endian cursor over a byte buffer with truncation reporting.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::TruncatedFile { offset: self.buf.len(), needed: n - (self.buf.len() - self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<(), FormatError> {
        let got = self.take(4).map_err(|_| FormatError::BadMagic { expected: String::from_utf8_lossy(m).into() })?;
        if got != m {
            return Err(FormatError::BadMagic { expected: String::from_utf8_lossy(m).into() });
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::SizeOverflow(vec![n as u64]))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn push_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

// ------------------------------------------------------------ point clouds

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    Xyz,
    Pcb,
}

impl CloudFormat {
    /// Format implied by the file extension (`.xyz`, otherwise `pcb`).
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyz") => CloudFormat::Xyz,
            _ => CloudFormat::Pcb,
        }
    }
}

pub fn encode_pcb(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + cloud.len() * 12);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    push_f32s(&mut out, cloud.points.iter().flat_map(|p| p.map(|c| c as f32)));
    out
}

pub fn decode_pcb(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CLOUD_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let count = r.u32()? as usize;
    let coords = r.f32s(count * 3)?;
    Ok(PointCloud::new(coords.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect()))
}

/// Decimal rendering with 9 significant digits.
fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn encode_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 36);
    for p in &cloud.points {
        s.push_str(&format!("{} {} {}\n", format_sig9(p[0]), format_sig9(p[1]), format_sig9(p[2])));
    }
    s
}

pub fn decode_xyz(text: &str) -> Result<PointCloud, FormatError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(FormatError::Parse { line: line_no, msg: format!("expected 3 coordinates, found {}", fields.len()) });
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|e| FormatError::Parse { line: line_no, msg: format!("{f:?}: {e}") })?;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud, FormatError> {
    match format {
        CloudFormat::Pcb => decode_pcb(&read_bytes(path)?),
        CloudFormat::Xyz => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            decode_xyz(&text)
        }
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<(), FormatError> {
    match format {
        CloudFormat::Pcb => write_bytes(path, &encode_pcb(cloud)),
        CloudFormat::Xyz => write_bytes(path, encode_xyz(cloud).as_bytes()),
    }
}

// ------------------------------------------------------------ raw tensors

pub fn encode_tensor(t: &Tensor<f32>) -> Result<Vec<u8>, FormatError> {
    if t.rank() == 0 {
        return Err(FormatError::BadRank);
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| FormatError::SizeOverflow(t.shape().iter().map(|&d| d as u64).collect()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    push_f32s(&mut out, t.data().iter().copied());
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let rank = r.u16()? as usize;
    if rank == 0 {
        return Err(FormatError::BadRank);
    }
    let dims: Vec<u32> = (0..rank).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let count = dims
        .iter()
        .try_fold(1u32, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::SizeOverflow(dims.iter().map(|&d| d as u64).collect()))?;
    let data = r.f32s(count as usize)?;
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::from_vec(&shape, data).expect("count matches dims"))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>, FormatError> {
    decode_tensor(&read_bytes(path)?)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<(), FormatError> {
    write_bytes(path, &encode_tensor(t)?)
}

// ------------------------------------------------------------ manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub class: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub role: DomainRole,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), FormatError> {
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(FormatError::Manifest(format!("duplicate class name {c:?}")));
            }
        }
        if let Some(e) = self.entries.iter().find(|e| !self.classes.contains(&e.class)) {
            return Err(FormatError::Manifest(format!("entry {:?} has unknown class {:?}", e.path, e.class)));
        }
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().position(|c| c == name).map(ClassId)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        self.validate()?;
        write_bytes(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// One labeled cloud; `id` is the manifest-relative path.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cloud: PointCloud,
    pub label: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: DomainRole,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loads the clouds listed in a manifest, optionally restricted to a split.
/// Paths resolve relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path, split: Option<Split>) -> Result<Dataset, FormatError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for e in manifest.entries.iter().filter(|e| split.is_none_or(|s| s == e.split)) {
        let path = root.join(&e.path);
        let label = manifest.class_id(&e.class).expect("validated");
        let cloud = read_cloud(&path, CloudFormat::from_path(&path))?.with_label(label);
        samples.push(Sample { id: e.path.clone(), cloud, label });
    }
    Ok(Dataset { name: manifest.name, role: manifest.role, classes: manifest.classes, samples })
}

// ------------------------------------------------------------ checkpoints

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rank: usize,
    dims: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    #[serde(default)]
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Model configuration plus named `f32` tensors and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &DgMvp<T>, meta: Value) -> Self {
        let tensors = model.params.entries().iter().map(|e| (e.name.clone(), e.value.cast::<f32>())).collect();
        Self { config: model.config.clone(), meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), rank: t.rank(), dims: t.shape().to_vec(), offset });
            offset += 4 * t.len();
        }
        let header = CheckpointHeader { config: self.config.clone(), meta: self.meta.clone(), tensors: entries };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            push_f32s(&mut out, t.data().iter().copied());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(FormatError::BadVersion(version));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        let base = r.pos;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.rank != e.dims.len() {
                return Err(FormatError::ShapeMismatch { name: e.name, expected: vec![e.rank], found: e.dims });
            }
            let count = e.dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.ok_or_else(|| FormatError::SizeOverflow(e.dims.iter().map(|&d| d as u64).collect()))?;
            let mut tr = Reader { buf: bytes, pos: base + e.offset };
            if tr.pos > bytes.len() {
                return Err(FormatError::TruncatedFile { offset: bytes.len(), needed: tr.pos - bytes.len() + 4 * count });
            }
            let data = tr.f32s(count)?;
            tensors.push((e.name, Tensor::from_vec(&e.dims, data).expect("count")));
        }
        Ok(Self { config: header.config, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_bytes(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&read_bytes(path)?)
    }

    /// Copies every model tensor from the checkpoint after checking that the
    /// configuration and all shapes agree.
    pub fn restore_into<T: Scalar>(&self, model: &mut DgMvp<T>) -> Result<(), FormatError> {
        check_config(&model.config, &self.config)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = self.get(&name).ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            let want = model.params.value(id).shape().to_vec();
            if t.shape() != want.as_slice() {
                return Err(FormatError::ShapeMismatch { name, expected: want, found: t.shape().to_vec() });
            }
            *model.params.value_mut(id) = t.cast();
        }
        Ok(())
    }
}

/// First differing field between two configurations, as a dotted path.
pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<(), FormatError> {
    let a = serde_json::to_value(expected)?;
    let b = serde_json::to_value(found)?;
    match first_difference(&a, &b, String::new()) {
        None => Ok(()),
        Some((field, e, f)) => Err(FormatError::ConfigMismatch { field, expected: e, found: f }),
    }
}

fn first_difference(a: &Value, b: &Value, path: String) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            for (k, va) in ma {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match mb.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, sub) {
                            return Some(d);
                        }
                    }
                    None => return Some((sub, va.to_string(), "nothing".into())),
                }
            }
            mb.keys()
                .find(|k| !ma.contains_key(*k))
                .map(|k| (if path.is_empty() { k.clone() } else { format!("{path}.{k}") }, "nothing".into(), mb[k].to_string()))
        }
        _ if a == b => None,
        _ => Some((path, a.to_string(), b.to_string())),
    }
}
