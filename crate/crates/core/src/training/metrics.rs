use serde::{Deserialize, Serialize};

/// Binary confusion counts with violating as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted_violating: bool, actually_violating: bool) {
        match (predicted_violating, actually_violating) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Percentages in [0, 100]. `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
}

impl Metrics {
    /// True when precision, recall and F1 are all defined.
    pub fn is_defined(&self) -> bool {
        self.precision.is_some() && self.recall.is_some() && self.f1.is_some()
    }
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn compute_metrics(c: Confusion, mean_loss: Option<f64>) -> Metrics {
    Metrics {
        confusion: c,
        precision: pct(c.tp, c.tp + c.fp),
        recall: pct(c.tp, c.tp + c.fn_),
        f1: pct(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        accuracy: pct(c.tp + c.tn, c.total()),
        mean_loss,
    }
}

/// Harmonic mean of precision and recall, in the same units as the inputs.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}
