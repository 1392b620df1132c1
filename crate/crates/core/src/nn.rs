//! Parameter storage, basic layers and the truncated residual backbone.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::ops::Mode;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (running statistics) are stored alongside but never trained.
    pub trainable: bool,
}

/// Flat, ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Same names and shapes, converted element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}

/// Uniform `±sqrt(6 / fan_in)` (He initialization for ReLU networks).
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), kaiming_uniform(&[out_dim, in_dim], in_dim, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over axis 1 with running statistics kept as
/// non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], T::one()), false),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// In training mode the running statistics are updated in `store`
    /// (unbiased variance, exponential moving average).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var, TensorError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (y, stats) = g.batch_norm(
            x,
            gamma,
            beta,
            mode,
            (store.value(self.running_mean).data(), store.value(self.running_var).data()),
            T::from_f64_lossy(self.eps),
        )?;
        if let Some(stats) = stats {
            let m = T::from_f64_lossy(self.momentum);
            let keep = T::one() - m;
            let unbias = T::from_usize(stats.count).expect("count") / T::from_usize(stats.count - 1).expect("count");
            for (r, &b) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + m * b * unbias;
            }
        }
        Ok(y)
    }
}

/// Residual backbone variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Depth {
    D9,
    D18,
    D50,
}

impl TryFrom<u32> for Depth {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, String> {
        match v {
            9 => Ok(Depth::D9),
            18 => Ok(Depth::D18),
            50 => Ok(Depth::D50),
            other => Err(format!("backbone depth {other} is not one of 9, 18, 50")),
        }
    }
}

impl From<Depth> for u32 {
    fn from(d: Depth) -> u32 {
        match d {
            Depth::D9 => 9,
            Depth::D18 => 18,
            Depth::D50 => 50,
        }
    }
}

impl Depth {
    fn blocks(self) -> [usize; 3] {
        match self {
            Depth::D9 => [1, 1, 1],
            Depth::D18 => [2, 2, 2],
            Depth::D50 => [3, 4, 6],
        }
    }
}

/// Residual network cut after its third stage (total stride 16).
///
/// Stage widths are `w, 2w, 4w`; for `w = 64` this is the 256-channel stage
/// of the usual 18-layer network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: Depth,
    pub width: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    /// Side length of the square input images.
    pub resolution: usize,
}

fn one() -> usize {
    1
}

impl BackboneConfig {
    pub const STRIDE: usize = 16;

    pub fn out_channels(&self) -> usize {
        4 * self.width
    }

    pub fn out_spatial(&self) -> (usize, usize) {
        (self.resolution / Self::STRIDE, self.resolution / Self::STRIDE)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.width == 0 {
            return Err(TensorError::BadConfig("backbone width must be positive".into()));
        }
        if self.depth == Depth::D50 && !self.width.is_multiple_of(4) {
            return Err(TensorError::BadConfig(format!("depth-50 width {} must be divisible by 4", self.width)));
        }
        if self.in_channels == 0 {
            return Err(TensorError::BadConfig("in_channels must be positive".into()));
        }
        if self.resolution < Self::STRIDE || !self.resolution.is_multiple_of(Self::STRIDE) {
            return Err(TensorError::BadConfig(format!(
                "resolution {} must be a positive multiple of {}",
                self.resolution,
                Self::STRIDE
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Block {
    Basic {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
        down: Option<(Conv2d, BatchNorm)>,
    },
    Bottleneck {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
        conv3: Conv2d,
        bn3: BatchNorm,
        down: Option<(Conv2d, BatchNorm)>,
    },
}

impl Block {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var, TensorError> {
        let (body, down) = match self {
            Block::Basic { conv1, bn1, conv2, bn2, down } => {
                let h = conv1.forward(g, store, x)?;
                let h = bn1.forward(g, store, h, mode)?;
                let h = g.relu(h);
                let h = conv2.forward(g, store, h)?;
                (bn2.forward(g, store, h, mode)?, down)
            }
            Block::Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, down } => {
                let h = conv1.forward(g, store, x)?;
                let h = bn1.forward(g, store, h, mode)?;
                let h = g.relu(h);
                let h = conv2.forward(g, store, h)?;
                let h = bn2.forward(g, store, h, mode)?;
                let h = g.relu(h);
                let h = conv3.forward(g, store, h)?;
                (bn3.forward(g, store, h, mode)?, down)
            }
        };
        let shortcut = match down {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s, mode)?
            }
            None => x,
        };
        let sum = g.add(body, shortcut)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
}

impl Backbone {
    /// Registers all parameters under `prefix` and initializes them from `rng`.
    pub fn build<T: Scalar>(config: &BackboneConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut Rng) -> Result<Self, TensorError> {
        config.validate()?;
        let w = config.width;
        let stem = Conv2d::new(store, &format!("{prefix}.stem.conv"), config.in_channels, w, 7, 2, 3, false, rng);
        let stem_bn = BatchNorm::new(store, &format!("{prefix}.stem.bn"), w);
        let mut blocks = Vec::new();
        let mut in_ch = w;
        for (stage, (&count, out_ch)) in config.depth.blocks().iter().zip([w, 2 * w, 4 * w]).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.block{i}", stage + 1);
                let down = (stride != 1 || in_ch != out_ch).then(|| {
                    (
                        Conv2d::new(store, &format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0, false, rng),
                        BatchNorm::new(store, &format!("{name}.down.bn"), out_ch),
                    )
                });
                let block = match config.depth {
                    Depth::D9 | Depth::D18 => Block::Basic {
                        conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, rng),
                        bn1: BatchNorm::new(store, &format!("{name}.bn1"), out_ch),
                        conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng),
                        bn2: BatchNorm::new(store, &format!("{name}.bn2"), out_ch),
                        down,
                    },
                    Depth::D50 => {
                        let mid = out_ch / 4;
                        Block::Bottleneck {
                            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, mid, 1, 1, 0, false, rng),
                            bn1: BatchNorm::new(store, &format!("{name}.bn1"), mid),
                            conv2: Conv2d::new(store, &format!("{name}.conv2"), mid, mid, 3, stride, 1, false, rng),
                            bn2: BatchNorm::new(store, &format!("{name}.bn2"), mid),
                            conv3: Conv2d::new(store, &format!("{name}.conv3"), mid, out_ch, 1, 1, 0, false, rng),
                            bn3: BatchNorm::new(store, &format!("{name}.bn3"), out_ch),
                            down,
                        }
                    }
                };
                blocks.push(block);
                in_ch = out_ch;
            }
        }
        Ok(Self { config: config.clone(), stem, stem_bn, blocks })
    }

    /// `N×1×R×R → N×C×(R/16)×(R/16)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var, TensorError> {
        let r = self.config.resolution;
        let expected = [self.config.in_channels, r, r];
        if g.shape(x).len() != 4 || g.shape(x)[1..] != expected {
            return Err(crate::tensor::mismatch("backbone", format!("[N, {}, {r}, {r}]", self.config.in_channels), g.shape(x)));
        }
        let h = self.stem.forward(g, store, x)?;
        let h = self.stem_bn.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let mut h = g.maxpool2d(h, 3, 2, 1)?;
        for block in &self.blocks {
            h = block.forward(g, store, h, mode)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn out_shape(depth: Depth, width: usize, r: usize) -> Vec<usize> {
        let cfg = BackboneConfig { depth, width, in_channels: 1, resolution: r };
        let mut store = ParamStore::<f32>::new();
        let net = Backbone::build(&cfg, &mut store, "bb", &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 1, r, r]));
        let y = net.forward(&mut g, &mut store, x, Mode::Eval).unwrap();
        g.shape(y).to_vec()
    }

    #[test]
    fn depth18_paper_width() {
        assert_eq!(out_shape(Depth::D18, 64, 128), vec![2, 256, 8, 8]);
    }

    #[test]
    fn depth18_reduced_width() {
        assert_eq!(out_shape(Depth::D18, 16, 128), vec![2, 64, 8, 8]);
    }

    #[test]
    fn other_depths_build() {
        assert_eq!(out_shape(Depth::D9, 8, 128), vec![2, 32, 8, 8]);
        assert_eq!(out_shape(Depth::D50, 8, 128), vec![2, 32, 8, 8]);
    }

    #[test]
    fn bad_configs() {
        let mut store = ParamStore::<f32>::new();
        for cfg in [
            BackboneConfig { depth: Depth::D18, width: 0, in_channels: 1, resolution: 64 },
            BackboneConfig { depth: Depth::D18, width: 8, in_channels: 1, resolution: 72 },
            BackboneConfig { depth: Depth::D50, width: 6, in_channels: 1, resolution: 64 },
        ] {
            assert!(matches!(Backbone::build(&cfg, &mut store, "bb", &mut seeded(0)), Err(TensorError::BadConfig(_))));
        }
        assert!(serde_json::from_str::<Depth>("34").is_err());
        assert_eq!(serde_json::from_str::<Depth>("50").unwrap(), Depth::D50);
    }

    #[test]
    fn batch_norm_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&mut g, &mut store, x, Mode::Train).unwrap();
        assert!((store.value(bn.running_mean).item() - 0.25).abs() < 1e-12);
        // unbiased var of 1..4 is 5/3
        assert!((store.value(bn.running_var).item() - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let before = store.value(bn.running_mean).clone();
        bn.forward(&mut g, &mut store, x, Mode::Eval).unwrap();
        assert_eq!(store.value(bn.running_mean), &before);
    }

    #[test]
    fn kaiming_bound() {
        let t: Tensor<f64> = kaiming_uniform(&[1000], 24, &mut seeded(1));
        let bound = 0.5;
        assert!(t.data().iter().all(|v| v.abs() < bound));
        assert!(t.data().iter().any(|v| v.abs() > 0.45));
    }
}
