//! Confusion matrices and per-class precision/recall/F1.

use crate::error::{Error, Result};
use crate::{CLASS_NAMES, NUM_CLASSES};

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Confusion {
    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::data(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(Error::data(format!("class index out of range: truth {t}, prediction {p}")));
            }
            c.counts[t][p] += 1;
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// Per-class metrics; an undefined ratio is reported as 0 and named in
    /// the returned warnings.
    pub fn per_class(&self) -> ([ClassMetrics; NUM_CLASSES], Vec<String>) {
        let mut warnings = Vec::new();
        let mut out = [ClassMetrics::default(); NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let tp = self.counts[c][c] as f64;
            let predicted: u64 = (0..NUM_CLASSES).map(|t| self.counts[t][c]).sum();
            let actual: u64 = self.counts[c].iter().sum();
            let mut ratio = |den: u64, what: &str| {
                if den == 0 {
                    warnings.push(format!("{what} of {} is undefined (zero denominator), reported as 0", CLASS_NAMES[c]));
                    0.0
                } else {
                    tp / den as f64
                }
            };
            let precision = ratio(predicted, "precision");
            let recall = ratio(actual, "recall");
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            out[c] = ClassMetrics { precision, recall, f1 };
        }
        (out, warnings)
    }
}

/// Evaluation summary; fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        if confusion.total() == 0 {
            return Err(Error::data("cannot evaluate an empty split"));
        }
        let (per_class, warnings) = confusion.per_class();
        Ok(EvalReport {
            confusion,
            accuracy: confusion.accuracy(),
            per_class,
            warnings,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        Self::from_confusion(Confusion::from_predictions(truth, predicted)?)
    }
}
