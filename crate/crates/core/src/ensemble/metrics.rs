use serde::{Deserialize, Serialize};

use super::{TrainedArm, TrainedEnsemble};
use crate::attacks::AttackedSet;
use crate::classifier::predict;
use crate::decorrelation::{correlation_r2, FeatureCache};
use crate::error::{Error, Result};
use crate::signal_io::{Dataset, SignalBatch};
use crate::tensor::Tensor;

/// Per-arm correctness summary over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean correctness over all arms and samples.
    pub average: f64,
    /// Fraction of samples with at least one correct arm.
    pub p1: f64,
    pub p2: f64,
    /// Fraction of samples on which every arm is correct.
    pub p3: f64,
    pub n: usize,
}

/// `correct[s][a]`: arm `a` classifies sample `s` correctly.
pub fn metrics_from(correct: &[Vec<bool>]) -> Result<Metrics> {
    if correct.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = correct.len() as f64;
    let arms = correct[0].len();
    let counts: Vec<usize> = correct
        .iter()
        .map(|row| row.iter().filter(|&&c| c).count())
        .collect();
    let at_least = |x: usize| counts.iter().filter(|&&c| c >= x).count() as f64 / n;
    Ok(Metrics {
        average: counts.iter().sum::<usize>() as f64 / (n * arms as f64),
        p1: at_least(1),
        p2: at_least(2),
        p3: at_least(3),
        n: correct.len(),
    })
}

/// Each arm classifies the batch through its own band filter.
pub fn correctness_matrix(arms: &[TrainedArm], batch: &SignalBatch) -> Result<Vec<Vec<bool>>> {
    let mut out = vec![Vec::with_capacity(arms.len()); batch.len()];
    for arm in arms {
        let preds = predict(&arm.params, batch, arm.filter.as_ref())?;
        for (row, (p, y)) in out.iter_mut().zip(preds.iter().zip(&batch.labels)) {
            row.push(p == y);
        }
    }
    Ok(out)
}

/// Metrics over the full natural test set.
pub fn evaluate_natural(ensemble: &TrainedEnsemble, test: &Dataset) -> Result<Metrics> {
    let batch = test.full_batch()?;
    metrics_from(&correctness_matrix(&ensemble.arms, &batch)?)
}

/// Metrics over the masked perturbed samples only.
pub fn evaluate_attacked(ensemble: &TrainedEnsemble, set: &AttackedSet) -> Result<Metrics> {
    let idx = set.masked_indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let l = set.perturbed[idx[0]].len();
    let data: Vec<f64> = idx
        .iter()
        .flat_map(|&i| set.perturbed[i].iter().copied())
        .collect();
    let batch = SignalBatch {
        x: Tensor::new(vec![idx.len(), 1, l], data)?,
        labels: idx.iter().map(|&i| set.labels[i]).collect(),
    };
    metrics_from(&correctness_matrix(&ensemble.arms, &batch)?)
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: String,
    pub attack: String,
    pub epsilon: f64,
    pub average: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub n_masked: usize,
}

impl ReportRow {
    pub fn new(kind: &str, attack: &str, epsilon: f64, m: &Metrics) -> Self {
        Self {
            kind: kind.to_string(),
            attack: attack.to_string(),
            epsilon,
            average: m.average,
            p1: m.p1,
            p2: m.p2,
            p3: m.p3,
            n_masked: m.n,
        }
    }
}

/// Ordered-pair R² between arms' training-set features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub kind: String,
    pub arm_ids: Vec<String>,
    /// `r2[i][j]`: arm `j`'s features regressed on arm `i`'s, unclamped.
    pub r2: Vec<Vec<f64>>,
    /// `r2` clamped to `[0, 1]`.
    pub r2_clamped: Vec<Vec<f64>>,
    /// Mean of both directions per unordered pair, clamped.
    pub pair_mean: Vec<Vec<f64>>,
    /// Mean over off-diagonal clamped entries.
    pub mean_off_diagonal: f64,
}

pub fn correlation_report(kind: &str, caches: &[&FeatureCache]) -> Result<CorrelationReport> {
    let k = caches.len();
    let mut r2 = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            r2[i][j] = correlation_r2(&caches[i].features, &caches[j].features)?;
        }
    }
    let clamped: Vec<Vec<f64>> = r2
        .iter()
        .map(|row| row.iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect();
    let pair_mean = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| 0.5 * (clamped[i][j] + clamped[j][i]))
                .collect()
        })
        .collect();
    let off: Vec<f64> = clamped
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(move |(j, _)| *j != i)
                .map(|(_, &v)| v)
        })
        .collect();
    let mean_off_diagonal = if off.is_empty() {
        0.0
    } else {
        off.iter().sum::<f64>() / off.len() as f64
    };
    Ok(CorrelationReport {
        kind: kind.to_string(),
        arm_ids: caches.iter().map(|c| c.model_id.clone()).collect(),
        r2,
        r2_clamped: clamped,
        pair_mean,
        mean_off_diagonal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let m = metrics_from(&vec![vec![true; 3]; 5]).unwrap();
        assert_eq!((m.average, m.p1, m.p2, m.p3), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_thirds() {
        let rows: Vec<Vec<bool>> = (0..9)
            .map(|s| (0..3).map(|a| s % 3 == a).collect())
            .collect();
        let m = metrics_from(&rows).unwrap();
        assert!((m.average - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.p1, m.p2, m.p3), (1.0, 0.0, 0.0));
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(metrics_from(&[]), Err(Error::EmptyMask)));
    }
}
