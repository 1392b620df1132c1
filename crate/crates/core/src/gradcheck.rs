//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use serde::Serialize;

use crate::autograd::{Gradients, Graph, Var};
use crate::model::{combined_loss, DgMvp};
use crate::nn::{ParamId, ParamStore};
use crate::ops::Mode;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// A scalar function of the trainable entries of a [`ParamStore`].
pub trait Objective<T: Scalar> {
    fn params(&mut self) -> &mut ParamStore<T>;
    fn loss(&mut self) -> Result<T, TensorError>;
    fn loss_and_grads(&mut self) -> Result<(T, Gradients<T>), TensorError>;

    /// Loss together with the [`Graph::branch_signature`] of its
    /// evaluation, if the objective can provide one.
    fn loss_and_branches(&mut self) -> Result<(T, Option<u64>), TensorError> {
        Ok((self.loss()?, None))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Number of scalar parameters probed (all of them if there are fewer).
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients at the
    /// noise level of the difference quotient are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { samples: 200, step: 1e-5, tolerance: 1e-4, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Probes replaced because `θ ± h` crossed a ReLU or max-selection
    /// boundary, where a difference quotient says nothing about the
    /// derivative.
    pub skipped_at_kinks: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst: Option<ProbeResult>,
    pub passed: bool,
    pub non_finite: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients against `(f(θ+h) − f(θ−h)) / 2h` on a random
/// subset of scalar parameters. Parameters are restored afterwards.
///
/// When the objective reports branch signatures, a probe whose perturbed
/// evaluations switch any piecewise choice is replaced by the next random
/// parameter, so `samples` probes are still compared. The check fails if
/// fewer smooth probes exist.
pub fn check_gradients<T: Scalar, O: Objective<T>>(obj: &mut O, cfg: &GradCheckConfig) -> Result<GradCheckReport, TensorError> {
    let (_, grads) = obj.loss_and_grads()?;
    let (_, base) = obj.loss_and_branches()?;
    let slots: Vec<(ParamId, usize)> = {
        let store = obj.params();
        store
            .trainable_ids()
            .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
            .collect()
    };
    let wanted = cfg.samples.min(slots.len());
    let order = sample(&mut seeded(cfg.seed), slots.len(), slots.len()).into_vec();
    let h = T::from_f64_lossy(cfg.step);
    let mut worst: Option<ProbeResult> = None;
    let mut non_finite = false;
    let (mut checked, mut skipped) = (0, 0);
    for &s in &order {
        if checked == wanted {
            break;
        }
        let (id, i) = slots[s];
        let original = obj.params().value(id).data()[i];
        obj.params().value_mut(id).data_mut()[i] = original + h;
        let (plus, sig_plus) = obj.loss_and_branches()?;
        obj.params().value_mut(id).data_mut()[i] = original - h;
        let (minus, sig_minus) = obj.loss_and_branches()?;
        obj.params().value_mut(id).data_mut()[i] = original;
        if sig_plus != base || sig_minus != base {
            skipped += 1;
            continue;
        }
        checked += 1;
        let numeric = (plus - minus).to_f64_lossy() / (2.0 * cfg.step);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i].to_f64_lossy());
        let rel_error = relative_error(analytic, numeric, cfg.floor);
        if !rel_error.is_finite() {
            non_finite = true;
        }
        if worst.as_ref().is_none_or(|w| !(rel_error <= w.rel_error)) {
            worst = Some(ProbeResult { param: obj.params().name(id).to_string(), index: i, analytic, numeric, rel_error });
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        checked,
        skipped_at_kinks: skipped,
        max_rel_error,
        tolerance: cfg.tolerance,
        passed: !non_finite && checked == wanted && max_rel_error <= cfg.tolerance,
        worst,
        non_finite,
    })
}

/// Combined two-branch loss of a model on a fixed batch.
pub struct ModelObjective<T: Scalar> {
    pub model: DgMvp<T>,
    pub input: Tensor<T>,
    pub targets: Vec<usize>,
    pub mode: Mode,
}

impl<T: Scalar> ModelObjective<T> {
    fn run(&mut self, with_grad: bool) -> Result<(T, u64, Option<Gradients<T>>), TensorError> {
        let mut g = Graph::new();
        let x = g.constant(self.input.clone());
        let logits = self.model.forward(&mut g, x, self.mode)?;
        let (l1, l2) = (self.model.config.lambda1, self.model.config.lambda2);
        let loss = combined_loss(&mut g, logits, &self.targets, l1, l2)?;
        let value = g.value(loss).item();
        let sig = g.branch_signature();
        if !with_grad {
            return Ok((value, sig, None));
        }
        g.backward(loss);
        Ok((value, sig, Some(g.param_grads(&self.model.params))))
    }
}

impl<T: Scalar> Objective<T> for ModelObjective<T> {
    fn params(&mut self) -> &mut ParamStore<T> {
        &mut self.model.params
    }

    fn loss(&mut self) -> Result<T, TensorError> {
        Ok(self.run(false)?.0)
    }

    fn loss_and_grads(&mut self) -> Result<(T, Gradients<T>), TensorError> {
        let (v, _, g) = self.run(true)?;
        Ok((v, g.expect("requested")))
    }

    fn loss_and_branches(&mut self) -> Result<(T, Option<u64>), TensorError> {
        let (v, sig, _) = self.run(false)?;
        Ok((v, Some(sig)))
    }
}

/// Objective built from a closure over a graph and a store; used to check
/// single layers with their inputs registered as parameters.
pub struct FnObjective<T: Scalar, F> {
    pub store: ParamStore<T>,
    pub f: F,
}

impl<T, F> FnObjective<T, F>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &mut ParamStore<T>) -> Result<Var, TensorError>,
{
    pub fn new(store: ParamStore<T>, f: F) -> Self {
        Self { store, f }
    }
}

impl<T, F> Objective<T> for FnObjective<T, F>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &mut ParamStore<T>) -> Result<Var, TensorError>,
{
    fn params(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn loss(&mut self) -> Result<T, TensorError> {
        let mut g = Graph::new();
        let out = (self.f)(&mut g, &mut self.store)?;
        Ok(g.value(out).item())
    }

    fn loss_and_grads(&mut self) -> Result<(T, Gradients<T>), TensorError> {
        let mut g = Graph::new();
        let out = (self.f)(&mut g, &mut self.store)?;
        g.backward(out);
        Ok((g.value(out).item(), g.param_grads(&self.store)))
    }

    fn loss_and_branches(&mut self) -> Result<(T, Option<u64>), TensorError> {
        let mut g = Graph::new();
        let out = (self.f)(&mut g, &mut self.store)?;
        Ok((g.value(out).item(), Some(g.branch_signature())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn quadratic_passes() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap(), true);
        let mut obj = FnObjective::new(store, move |g: &mut Graph<f64>, s: &mut ParamStore<f64>| {
            let v = g.param(s, x);
            let r = g.relu(v);
            let sq = g.add(r, v)?;
            g.dot_const(sq, Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap())
        });
        let rep = check_gradients(&mut obj, &GradCheckConfig::default()).unwrap();
        assert_eq!(rep.checked, 3);
        assert!(rep.passed, "{rep:?}");
    }
}
