//! Optimization: Adam, the per-sample training pipeline, epochs, and the
//! checkpointing fit driver.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::augment::{sample_transform, AugmentError, TransformSpec};
use crate::autograd::{Gradients, Graph};
use crate::eval::{evaluate, EvalConfig, EvalError, Metrics};
use crate::geom::{downsample, normalize, random_angle, rotate_z, GeomError, PointCloud};
use crate::io::{Checkpoint, Dataset, FormatError};
use crate::model::{DgMvp, ModelConfig};
use crate::nn::ParamStore;
use crate::ops::Mode;
use crate::project::{project, DepthImageStack, ProjectError};
use crate::rng::{stream, Rng};
use crate::scalar::Scalar;
use crate::tensor::{mismatch, Tensor, TensorError};

/// Fresh transform draws for a sample that trips the point-count guard.
pub const MAX_AUGMENT_RETRIES: usize = 3;
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {id}: label {label} outside {classes} classes")]
    BadLabel { id: String, label: usize, classes: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of adding it
    /// to the gradient.
    pub decoupled_weight_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub augment: bool,
    /// Re-fit the cloud to the unit ball after the random transform, as
    /// evaluation does for every (already defective) input cloud. Without
    /// it, training sees holed clouds in their original frame while test
    /// clouds with real holes arrive re-centred and re-scaled.
    pub renormalize_after_augment: bool,
    /// Points per cloud after resampling, before projection.
    pub num_points: usize,
    /// Validation interval in epochs; 0 disables validation.
    pub eval_every: usize,
    /// Stop once an epoch's mean loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 5e-5,
            decoupled_weight_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            augment: true,
            renormalize_after_augment: true,
            num_points: 1024,
            eval_every: 1,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(format!("batch_size {} below 2", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::BadConfig("adam hyperparameters out of range".into()));
        }
        if self.num_points == 0 {
            return Err(TrainError::BadConfig("num_points must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like every entry of `store` (non-trainable
    /// entries keep unused slots so indices line up with parameter ids).
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    fn to_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for id in store.trainable_ids() {
            let name = store.name(id);
            out.push((format!("adam.m.{name}"), self.m[id.index()].cast()));
            out.push((format!("adam.v.{name}"), self.v[id.index()].cast()));
        }
        out
    }

    fn from_checkpoint(ckpt: &Checkpoint, store: &ParamStore<T>, step: u64) -> Result<Self, TrainError> {
        let mut state = Self::new(store);
        state.step = step;
        for id in store.trainable_ids() {
            let name = store.name(id);
            for (prefix, slot) in [("adam.m", &mut state.m[id.index()]), ("adam.v", &mut state.v[id.index()])] {
                let key = format!("{prefix}.{name}");
                let t = ckpt.get(&key).ok_or_else(|| FormatError::MissingTensor(key.clone()))?;
                if t.shape() != slot.shape() {
                    return Err(FormatError::ShapeMismatch { name: key, expected: slot.shape().to_vec(), found: t.shape().to_vec() }.into());
                }
                *slot = t.cast();
            }
        }
        Ok(state)
    }
}

/// One Adam update with bias correction. Weight decay is added to the
/// gradient unless `decoupled_weight_decay` is set.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut AdamState<T>, cfg: &TrainConfig) -> Result<(), TensorError> {
    if state.m.len() != store.len() {
        return Err(mismatch("adam state", format!("{} slots", store.len()), &[state.m.len()]));
    }
    for (id, g) in grads.iter() {
        if g.shape() != store.value(id).shape() || state.m[id.index()].shape() != g.shape() {
            return Err(mismatch("adam_step", format!("{:?}", store.value(id).shape()), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let f = T::from_f64_lossy;
    let (b1, b2, eps, lr, wd) = (f(cfg.beta1), f(cfg.beta2), f(cfg.eps), f(cfg.learning_rate), f(cfg.weight_decay));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (id, g) in grads.iter() {
        let k = id.index();
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let p = store.value_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = if cfg.decoupled_weight_decay { g.data()[i] } else { g.data()[i] + wd * p[i] };
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            if cfg.decoupled_weight_decay {
                p[i] -= lr * (update + wd * p[i]);
            } else {
                p[i] -= lr * update;
            }
        }
    }
    Ok(())
}

/// A sample after the training pipeline.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub stack: DepthImageStack,
    /// Transform actually applied (identity after a guard fallback).
    pub transform: TransformSpec,
    /// Points after augmentation, before resampling.
    pub points_after_augment: usize,
    pub fallback: bool,
}

/// normalize → optional random transform (→ optional re-normalization) →
/// z-rotation → resample → project. Everything random comes from `rng`.
pub fn prepare_train_sample(cloud: &PointCloud, model: &ModelConfig, cfg: &TrainConfig, rng: &mut Rng) -> Result<PreparedSample, TrainError> {
    let normalized = normalize(cloud)?.cloud;
    let mut transform = TransformSpec::Identity;
    let mut fallback = false;
    let mut current = None;
    if cfg.augment {
        for _ in 0..=MAX_AUGMENT_RETRIES {
            let spec = sample_transform(rng);
            match spec.apply(&normalized, rng) {
                Ok(c) => {
                    transform = spec;
                    current = Some(c);
                    break;
                }
                Err(AugmentError::TooFewPoints { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        fallback = current.is_none();
    }
    let mut augmented = current.unwrap_or(normalized);
    let points_after_augment = augmented.len();
    if cfg.renormalize_after_augment && transform != TransformSpec::Identity {
        augmented = normalize(&augmented)?.cloud;
    }
    let rotated = rotate_z(&augmented, random_angle(rng));
    let sampled = downsample(&rotated, cfg.num_points, rng)?;
    let stack = project(&sampled, model.view_set, model.backbone.resolution)?;
    Ok(PreparedSample { stack, transform, points_after_augment, fallback })
}

/// Randomness for sample `index` of `epoch`, independent of batch layout.
pub fn sample_stream(seed: u64, epoch: usize, index: usize) -> Rng {
    stream(&[seed, epoch as u64, index as u64])
}

/// Visiting order of the dataset for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(&[seed, epoch as u64, SHUFFLE_STREAM]));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean combined loss over the samples used.
    pub loss: f64,
    pub lce1: f64,
    pub lce2: f64,
    pub samples: usize,
    pub batches: usize,
    pub augment_fallbacks: usize,
    pub seconds: f64,
    pub samples_per_second: f64,
}

fn check_dataset(dataset: &Dataset, classes: usize) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.label.0 >= classes) {
        return Err(TrainError::BadLabel { id: s.id.clone(), label: s.label.0, classes });
    }
    Ok(())
}

/// One pass over `dataset`. `epoch` is 1-based and seeds the shuffle and
/// every sample's augmentation stream. A trailing batch smaller than 2 is
/// skipped because batch norm needs at least two samples.
pub fn train_epoch<T: Scalar>(model: &mut DgMvp<T>, dataset: &Dataset, cfg: &TrainConfig, epoch: usize, adam: &mut AdamState<T>) -> Result<EpochReport, TrainError> {
    cfg.validate()?;
    check_dataset(dataset, model.config.num_classes)?;
    let start = Instant::now();
    let order = epoch_order(cfg.seed, epoch, dataset.len());
    let (mut total, mut total1, mut total2) = (0.0, 0.0, 0.0);
    let (mut samples, mut batches, mut fallbacks) = (0, 0, 0);
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            log::debug!("epoch {epoch}: skipping trailing batch of {}", chunk.len());
            continue;
        }
        let prepared: Vec<PreparedSample> = chunk
            .par_iter()
            .map(|&i| {
                let mut rng = sample_stream(cfg.seed, epoch, i);
                prepare_train_sample(&dataset.samples[i].cloud, &model.config, cfg, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        fallbacks += prepared.iter().filter(|p| p.fallback).count();
        let stacks: Vec<&DepthImageStack> = prepared.iter().map(|p| &p.stack).collect();
        let targets: Vec<usize> = chunk.iter().map(|&i| dataset.samples[i].label.0).collect();
        let input = model.input_tensor(&stacks)?;
        drop(prepared);

        let mut g = Graph::new();
        let x = g.constant(input);
        let logits = model.forward(&mut g, x, Mode::Train)?;
        let ce1 = g.cross_entropy(logits.global, &targets)?;
        let ce2 = g.cross_entropy(logits.strips, &targets)?;
        let w1 = g.scale(ce1, T::from_f64_lossy(model.config.lambda1));
        let w2 = g.scale(ce2, T::from_f64_lossy(model.config.lambda2));
        let loss = g.add(w1, w2)?;
        let n = chunk.len() as f64;
        total += g.value(loss).item().to_f64_lossy() * n;
        total1 += g.value(ce1).item().to_f64_lossy() * n;
        total2 += g.value(ce2).item().to_f64_lossy() * n;
        g.backward(loss);
        let grads = g.param_grads(&model.params);
        drop(g);
        adam_step(&mut model.params, &grads, adam, cfg)?;
        samples += chunk.len();
        batches += 1;
    }
    let seconds = start.elapsed().as_secs_f64();
    let denom = samples.max(1) as f64;
    Ok(EpochReport {
        epoch,
        loss: total / denom,
        lce1: total1 / denom,
        lce2: total2 / denom,
        samples,
        batches,
        augment_fallbacks: fallbacks,
        seconds,
        samples_per_second: samples as f64 / seconds.max(1e-9),
    })
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lce1: f64,
    pub lce2: f64,
    pub val_overall_acc: Option<f64>,
    pub val_avg_class_acc: Option<f64>,
    pub augment_fallbacks: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Validation metrics of the model before any update, when a
    /// validation set is given.
    pub initial: Option<Metrics>,
    /// Records of this call only (a resumed run starts after the restored epoch).
    pub history: Vec<HistoryRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub epochs_completed: usize,
}

/// Output locations of [`fit`].
pub struct FitOutput<'a> {
    pub dir: &'a Path,
    /// Continue from `dir/final.ckpt` if it exists.
    pub resume: bool,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

fn checkpoint<T: Scalar>(model: &DgMvp<T>, adam: &AdamState<T>, cfg: &TrainConfig, epoch: usize, best: Option<(usize, f64)>) -> Checkpoint {
    let meta = json!({
        "epoch": epoch,
        "adam_step": adam.step,
        "train": cfg,
        "best_epoch": best.map(|b| b.0),
        "best_val_acc": best.map(|b| b.1),
    });
    let mut ckpt = Checkpoint::from_model(model, meta);
    ckpt.tensors.extend(adam.to_tensors(&model.params));
    ckpt
}

/// Trains for `cfg.epochs` epochs. With an output directory, writes
/// `final.ckpt` (with optimizer state) after every epoch, `best.ckpt`
/// whenever validation accuracy improves, and appends one JSON line per
/// epoch to `history.jsonl`.
pub fn fit<T: Scalar>(
    model: &mut DgMvp<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<FitOutput<'_>>,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    check_dataset(train, model.config.num_classes)?;
    let eval_cfg = EvalConfig { num_points: cfg.num_points, batch_size: cfg.batch_size.max(1) };
    let mut adam = AdamState::new(&model.params);
    let mut start_epoch = 1;
    let mut best: Option<(usize, f64)> = None;

    if let Some(o) = &out {
        fs::create_dir_all(o.dir).map_err(io_err(o.dir))?;
        let final_path = o.dir.join(FINAL_CHECKPOINT);
        if o.resume && final_path.exists() {
            let ckpt = Checkpoint::load(&final_path)?;
            ckpt.restore_into(model)?;
            let epoch = ckpt.meta["epoch"].as_u64().unwrap_or(0) as usize;
            let step = ckpt.meta["adam_step"].as_u64().unwrap_or(0);
            adam = AdamState::from_checkpoint(&ckpt, &model.params, step)?;
            best = ckpt.meta["best_epoch"].as_u64().zip(ckpt.meta["best_val_acc"].as_f64()).map(|(e, a)| (e as usize, a));
            start_epoch = epoch + 1;
            log::info!("resuming after epoch {epoch}");
        } else {
            let history = o.dir.join(HISTORY_FILE);
            if history.exists() {
                fs::remove_file(&history).map_err(io_err(&history))?;
            }
        }
    }

    let initial = match val {
        Some(v) if start_epoch == 1 => Some(evaluate(model, v, &eval_cfg)?.metrics),
        _ => None,
    };
    let mut history = Vec::new();
    let mut completed = start_epoch - 1;
    for epoch in start_epoch..=cfg.epochs {
        let report = train_epoch(model, train, cfg, epoch, &mut adam)?;
        let due = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let metrics = match val {
            Some(v) if due => Some(evaluate(model, v, &eval_cfg)?.metrics),
            _ => None,
        };
        let record = HistoryRecord {
            epoch,
            loss: report.loss,
            lce1: report.lce1,
            lce2: report.lce2,
            val_overall_acc: metrics.as_ref().map(|m| m.overall_acc),
            val_avg_class_acc: metrics.as_ref().map(|m| m.avg_class_acc),
            augment_fallbacks: report.augment_fallbacks,
            seconds: report.seconds,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (ce1 {:.4}, ce2 {:.4}) val {:?} [{:.1} samples/s]",
            report.loss,
            report.lce1,
            report.lce2,
            record.val_overall_acc,
            report.samples_per_second
        );
        let improved = match (record.val_overall_acc, best) {
            (Some(a), Some((_, b))) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best = Some((epoch, record.val_overall_acc.expect("checked")));
        }
        if let Some(o) = &out {
            let line = serde_json::to_string(&record).map_err(FormatError::from)?;
            let path = o.dir.join(HISTORY_FILE);
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            writeln!(f, "{line}").map_err(io_err(&path))?;
            let ckpt = checkpoint(model, &adam, cfg, epoch, best);
            if improved {
                ckpt.save(&o.dir.join(BEST_CHECKPOINT))?;
            }
            ckpt.save(&o.dir.join(FINAL_CHECKPOINT))?;
        }
        history.push(record);
        completed = epoch;
        if cfg.target_loss.is_some_and(|t| report.loss < t) {
            log::info!("target loss reached at epoch {epoch}");
            break;
        }
    }
    if let Some(o) = &out {
        let final_path = o.dir.join(FINAL_CHECKPOINT);
        if !final_path.exists() {
            checkpoint(model, &adam, cfg, completed, best).save(&final_path)?;
        }
        if val.is_none() || best.is_none() {
            fs::copy(&final_path, o.dir.join(BEST_CHECKPOINT)).map_err(io_err(&final_path))?;
        }
    }
    Ok(FitResult { initial, history, best_epoch: best.map(|b| b.0), best_val_acc: best.map(|b| b.1), epochs_completed: completed })
}

/// Mean and sample standard deviation over per-seed results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
}

impl SeedSummary {
    pub fn from_values(seeds: Vec<u64>, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { seeds, values, mean, stddev }
    }
}

/// Runs `run` once per seed (at least three) and summarizes the results.
pub fn multi_seed<E>(seeds: &[u64], mut run: impl FnMut(u64) -> Result<f64, E>) -> Result<SeedSummary, E> {
    assert!(seeds.len() >= 3, "multi-seed runs need at least 3 seeds");
    let values = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(SeedSummary::from_values(seeds.to_vec(), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::nn::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_vec(&[1], vec![x]).unwrap(), true);
        (s, id)
    }

    fn grads_of(store: &ParamStore<f64>, id: crate::nn::ParamId, g: f64) -> Gradients<f64> {
        let mut graph = Graph::new();
        let v = graph.param(store, id);
        let out = graph.dot_const(v, Tensor::from_vec(&[1], vec![g]).unwrap()).unwrap();
        graph.backward(out);
        graph.param_grads(store)
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let (mut s, id) = scalar_store(0.3);
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamState::new(&s);
        let g = grads_of(&s, id, 0.0);
        adam_step(&mut s, &g, &mut st, &cfg).unwrap();
        assert_eq!(s.value(id).data()[0], 0.3);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let (mut s, id) = scalar_store(1.0);
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamState::new(&s);
        let g = grads_of(&s, id, 1.0);
        adam_step(&mut s, &g, &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let (mut s, id) = scalar_store(1.0);
        let cfg = TrainConfig { learning_rate: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut st = AdamState::new(&s);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let x = s.value(id).data()[0];
            let g = grads_of(&s, id, 2.0 * x);
            adam_step(&mut s, &g, &mut st, &cfg).unwrap();
            let now = s.value(id).data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn coupled_and_decoupled_decay_differ() {
        let cfg = TrainConfig { weight_decay: 0.1, ..Default::default() };
        let (mut a, id) = scalar_store(2.0);
        let (mut b, _) = scalar_store(2.0);
        let g = grads_of(&a, id, 0.5);
        let mut sa = AdamState::new(&a);
        let mut sb = AdamState::new(&b);
        adam_step(&mut a, &g, &mut sa, &cfg).unwrap();
        adam_step(&mut b, &g, &mut sb, &TrainConfig { decoupled_weight_decay: true, ..cfg.clone() }).unwrap();
        assert_ne!(a.value(id).data()[0], b.value(id).data()[0]);
    }

    #[test]
    fn batch_size_guard() {
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shuffle_depends_on_epoch_only_through_seed() {
        assert_eq!(epoch_order(3, 1, 50), epoch_order(3, 1, 50));
        assert_ne!(epoch_order(3, 1, 50), epoch_order(3, 2, 50));
    }

    #[test]
    fn seed_summary_uses_sample_stddev() {
        let s = SeedSummary::from_values(vec![0, 1, 2], vec![0.7, 0.8, 0.9]);
        assert!((s.mean - 0.8).abs() < 1e-12);
        assert!((s.stddev - 0.1).abs() < 1e-12);
    }
}
