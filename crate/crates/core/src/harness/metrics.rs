use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `m[i][j]` counts samples of true class `i` predicted as `j`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::Input(format!("class pair ({l}, {p}) out of range for {k} classes")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Trace over total; 0 for an empty matrix.
pub fn matrix_accuracy(m: &[Vec<u64>]) -> f64 {
    let total: u64 = m.iter().flatten().sum();
    let trace: u64 = (0..m.len()).map(|i| m[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        trace as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Training/evaluation summary. For segmentation runs the accuracies are
/// pixel accuracies and there is no confusion matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub preset: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub test_accuracy: f64,
    pub test_samples: usize,
    pub confusion_matrix: Option<Vec<Vec<u64>>>,
}
