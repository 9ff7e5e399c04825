use serde::{Deserialize, Serialize};

use crate::data::ChangeClass;

/// `counts[true][predicted]`, rows and columns in Increase, NoChange,
/// Decrease order.
pub type Confusion = [[u64; 3]; 3];

pub fn confusion(truth: &[ChangeClass], predicted: &[ChangeClass]) -> Confusion {
    let mut m = [[0u64; 3]; 3];
    for (t, p) in truth.iter().zip(predicted) {
        m[t.index()][p.index()] += 1;
    }
    m
}

/// Macro-averaged classification scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

impl ClassScores {
    /// Per-class scores averaged with equal weight. Undefined ratios (no
    /// predictions or no members of a class) count as 0.
    pub fn from_confusion(m: &Confusion) -> Self {
        let total: u64 = m.iter().flatten().sum();
        let mut f1 = 0.0;
        let mut precision = 0.0;
        let mut recall = 0.0;
        for c in 0..3 {
            let tp = m[c][c] as f64;
            let predicted: u64 = (0..3).map(|r| m[r][c]).sum();
            let actual: u64 = m[c].iter().sum();
            let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
            precision += p;
            recall += r;
            f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        let correct: u64 = (0..3).map(|c| m[c][c]).sum();
        Self {
            macro_f1: f1 / 3.0,
            macro_precision: precision / 3.0,
            macro_recall: recall / 3.0,
            accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            confusion: *m,
        }
    }

    pub fn compute(truth: &[ChangeClass], predicted: &[ChangeClass]) -> Self {
        Self::from_confusion(&confusion(truth, predicted))
    }
}

/// Macro F1 of a label/prediction pairing.
pub fn macro_f1(truth: &[ChangeClass], predicted: &[ChangeClass]) -> f64 {
    ClassScores::compute(truth, predicted).macro_f1
}
