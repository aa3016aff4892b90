//! Confusion counts and the precision / accuracy / F1 summary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("all confusion counts are zero")]
    EmptyCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, expected: bool, observed: bool) {
        match (expected, observed) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// `None` marks a 0/0 ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

/// F1 is the harmonic mean of precision and recall.
pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsResult, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricsResult { precision, recall, accuracy: ratio(c.tp + c.tn, c.total()), f1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn formulas_against_hand_computation() {
        let m = compute_metrics(&counts(89, 64, 15, 40)).unwrap();
        // 89/153, 129/208, 2*89/(2*89+64+15)
        assert!((m.precision.unwrap() - 89.0 / 153.0).abs() < 1e-12);
        assert!((m.accuracy.unwrap() - 129.0 / 208.0).abs() < 1e-12);
        assert!((m.f1.unwrap() - 178.0 / 257.0).abs() < 1e-12);
        assert_eq!(compute_metrics(&counts(69, 0, 34, 104)).unwrap().precision, Some(1.0));
    }

    #[test]
    fn degenerate_ratios_are_undefined() {
        let m = compute_metrics(&counts(0, 0, 0, 10)).unwrap();
        assert_eq!((m.precision, m.recall, m.accuracy, m.f1), (None, None, Some(1.0), None));
        let m = compute_metrics(&counts(0, 3, 2, 0)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (Some(0.0), Some(0.0), None));
        assert_eq!(compute_metrics(&counts(0, 0, 0, 0)), Err(MetricsError::EmptyCounts));
    }

    #[test]
    fn counts_serialize_with_fn_key() {
        let c = counts(1, 2, 3, 4);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, r#"{"tp":1,"fp":2,"fn":3,"tn":4}"#);
        assert_eq!(serde_json::from_str::<ConfusionCounts>(&json).unwrap(), c);
        let mut r = ConfusionCounts::default();
        for (e, o) in [(true, true), (false, true), (true, false), (false, false), (true, true)] {
            r.record(e, o);
        }
        assert_eq!(r, counts(2, 1, 1, 1));
    }
}
