//! Classification metrics, the point-utilization profiler and dataset
//! evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{downsample, normalize, GeomError, PointCloud};
use crate::io::Dataset;
use crate::model::DgMvp;
use crate::project::{project, DepthImageStack, ProjectError};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("class id {id} outside {classes} classes")]
    BadClassId { id: usize, classes: usize },
    #[error("feature matrix is empty")]
    EmptyMatrix,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Project(#[from] ProjectError),
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    /// CSV with a header row of class names and one row of counts per
    /// true class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = names.join(",");
        s.push('\n');
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_acc: f64,
    /// Mean recall over the classes that occur among the truths.
    pub avg_class_acc: f64,
    pub confusion: ConfusionMatrix,
}

pub fn metrics(predictions: &[usize], truths: &[usize], classes: usize) -> Result<Metrics, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (&p, &t) in predictions.iter().zip(truths) {
        if let Some(&id) = [p, t].iter().find(|&&id| id >= classes) {
            return Err(EvalError::BadClassId { id, classes });
        }
        confusion.counts[t][p] += 1;
    }
    let overall_acc = confusion.trace() as f64 / confusion.total() as f64;
    let recalls: Vec<f64> = confusion
        .counts
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let avg_class_acc = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(Metrics { overall_acc, avg_class_acc, confusion })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub used_count: usize,
    pub total_count: usize,
    pub used_indices: Vec<usize>,
}

/// Points whose features survive a global max-pool over an `M×D` matrix:
/// the set of column argmax rows, ties going to the lowest row.
pub fn utilization<T: Scalar>(features: &Tensor<T>) -> Result<UtilizationReport, EvalError> {
    let (m, d) = match features.shape() {
        [m, d] if *m > 0 && *d > 0 => (*m, *d),
        _ => return Err(EvalError::EmptyMatrix),
    };
    let data = features.data();
    let mut best_row = vec![0usize; d];
    for row in 1..m {
        let r = &data[row * d..(row + 1) * d];
        for (j, &v) in r.iter().enumerate() {
            if v > data[best_row[j] * d + j] {
                best_row[j] = row;
            }
        }
    }
    best_row.sort_unstable();
    best_row.dedup();
    Ok(UtilizationReport { used_count: best_row.len(), total_count: m, used_indices: best_row })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Points per cloud after resampling.
    pub num_points: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { num_points: 1024, batch_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub truth: usize,
    pub prediction: usize,
    pub global_argmax: usize,
    pub strips_argmax: usize,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub metrics: Metrics,
    /// One record per sample, in dataset order.
    pub predictions: Vec<PredictionRecord>,
}

/// FNV-1a of the sample id; seeds the resampling of that sample.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// normalize → resample → project, with no augmentation or rotation. The
/// resampling stream depends only on the sample id.
pub fn prepare_eval_sample(id: &str, cloud: &PointCloud, model_view_set: crate::project::ViewSetKind, resolution: usize, num_points: usize) -> Result<DepthImageStack, EvalError> {
    let normalized = normalize(cloud)?.cloud;
    let sampled = downsample(&normalized, num_points, &mut stream(&[id_hash(id)]))?;
    Ok(project(&sampled, model_view_set, resolution)?)
}

/// Predicts every sample in inference mode. Samples are processed in id
/// order so the result does not depend on dataset order.
pub fn evaluate<T: Scalar>(model: &mut DgMvp<T>, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalResult, EvalError> {
    use rayon::prelude::*;
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let classes = model.config.num_classes;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset.samples[a].id.cmp(&dataset.samples[b].id));
    let mut records: Vec<Option<PredictionRecord>> = vec![None; dataset.len()];
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        let stacks: Vec<DepthImageStack> = chunk
            .par_iter()
            .map(|&i| {
                let s = &dataset.samples[i];
                prepare_eval_sample(&s.id, &s.cloud, model.config.view_set, model.config.backbone.resolution, cfg.num_points)
            })
            .collect::<Result<_, _>>()?;
        let refs: Vec<&DepthImageStack> = stacks.iter().collect();
        let preds = model.predict(&refs)?;
        for (&i, p) in chunk.iter().zip(preds) {
            let s = &dataset.samples[i];
            if s.label.0 >= classes {
                return Err(EvalError::BadClassId { id: s.label.0, classes });
            }
            records[i] = Some(PredictionRecord {
                id: s.id.clone(),
                truth: s.label.0,
                prediction: p.class,
                global_argmax: p.global_argmax,
                strips_argmax: p.strips_argmax,
            });
        }
    }
    let predictions: Vec<PredictionRecord> = records.into_iter().map(|r| r.expect("every sample predicted")).collect();
    let p: Vec<usize> = predictions.iter().map(|r| r.prediction).collect();
    let t: Vec<usize> = predictions.iter().map(|r| r.truth).collect();
    Ok(EvalResult { metrics: metrics(&p, &t, classes)?, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_fixture() {
        let m = metrics(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(m.overall_acc, 2.0 / 3.0);
        assert_eq!(m.avg_class_acc, 0.75);
        assert_eq!(m.confusion.counts, vec![vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn perfect_and_absent_class() {
        let m = metrics(&[0, 2, 2], &[0, 2, 2], 3).unwrap();
        assert_eq!((m.overall_acc, m.avg_class_acc), (1.0, 1.0));
        assert_eq!(m.confusion.trace(), 3);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(metrics(&[0], &[0, 1], 2), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(metrics(&[3], &[0], 2), Err(EvalError::BadClassId { id: 3, .. })));
        assert!(matches!(metrics(&[], &[], 2), Err(EvalError::Empty)));
    }

    #[test]
    fn utilization_simple_cases() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0f64 } else { 0.0 });
        assert_eq!(utilization(&eye).unwrap().used_count, 3);
        let dom = Tensor::from_vec(&[3, 2], vec![0.0f64, 0.0, 5.0, 5.0, 1.0, 1.0]).unwrap();
        let r = utilization(&dom).unwrap();
        assert_eq!((r.used_count, r.used_indices.clone()), (1, vec![1]));
        assert!(matches!(utilization(&Tensor::<f64>::zeros(&[0, 3])), Err(EvalError::EmptyMatrix)));
        // All-equal columns go to row 0.
        assert_eq!(utilization(&Tensor::<f64>::zeros(&[4, 3])).unwrap().used_indices, vec![0]);
    }

    #[test]
    fn confusion_csv_layout() {
        let m = metrics(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(m.confusion.to_csv(&["a".into(), "b".into()]), "a,b\n1,1\n0,1\n");
    }
}
