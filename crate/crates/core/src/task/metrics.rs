use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality over one test set. F1 is macro-averaged: the
/// unweighted mean of per-class F1, where a class with no true and no
/// predicted members scores 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n_samples: usize,
}

impl Metrics {
    /// Metrics from parallel slices of true and predicted class indices.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::Shape(format!("class index out of range for {n_classes} classes")));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(&confusion))
    }

    /// `confusion[true][predicted]` counts.
    pub fn from_confusion(confusion: &[Vec<usize>]) -> Self {
        let c = confusion.len();
        let n: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let f1_sum: f64 = (0..c)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let actual: usize = confusion[k].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[k]).sum();
                let denom = (actual + predicted) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .sum();
        Self {
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            macro_f1: if c == 0 { 0.0 } else { f1_sum / c as f64 },
            n_samples: n,
        }
    }
}
