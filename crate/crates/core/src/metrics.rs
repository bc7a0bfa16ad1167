//! Pixel-level confusion counts and the derived P/R/F1/OA/IoU scores.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Changed-class probability above which a pixel is predicted as changed.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> Metrics {
        metrics(self)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.tn += rhs.tn;
        self.fn_ += rhs.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
    pub iou: f64,
}

/// Scores as percentages rounded to two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentReport {
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    #[serde(rename = "IoU")]
    pub iou: f64,
}

impl Metrics {
    pub fn percent(&self) -> PercentReport {
        let pct = |v: f64| (v * 10000.0).round() / 100.0;
        PercentReport {
            p: pct(self.precision),
            r: pct(self.recall),
            f1: pct(self.f1),
            oa: pct(self.oa),
            iou: pct(self.iou),
        }
    }
}

impl std::fmt::Display for PercentReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "P: {:.2}  R: {:.2}  F1: {:.2}  OA: {:.2}  IoU: {:.2}",
            self.p, self.r, self.f1, self.oa, self.iou
        )
    }
}

/// Thresholds a probability map at [`DECISION_THRESHOLD`].
pub fn binarize(prob: &Tensor) -> Tensor {
    let data = prob
        .data()
        .iter()
        .map(|&p| if p > DECISION_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(prob.shape(), data).expect("same shape")
}

/// Counts agreement between a binary prediction and a binary label.
pub fn confusion(pred_binary: &Tensor, label: &Tensor) -> Result<ConfusionCounts> {
    if pred_binary.numel() != label.numel() {
        return Err(config_err!(
            "confusion: prediction {:?} and label {:?} differ",
            pred_binary.shape(),
            label.shape()
        ));
    }
    let mut cc = ConfusionCounts::default();
    for (&p, &y) in pred_binary.data().iter().zip(label.data()) {
        match (p > 0.5, y > 0.5) {
            (true, true) => cc.tp += 1,
            (true, false) => cc.fp += 1,
            (false, false) => cc.tn += 1,
            (false, true) => cc.fn_ += 1,
        }
    }
    Ok(cc)
}

/// Derives the five scores.
///
/// A zero denominator for P or R yields 0 (some error pixel must exist for
/// that to happen unless the matrix is all TN); a matrix with no TP, FP or FN
/// scores 1 everywhere.
pub fn metrics(cc: &ConfusionCounts) -> Metrics {
    let (tp, fp, tn, fn_) = (cc.tp as f64, cc.fp as f64, cc.tn as f64, cc.fn_ as f64);
    if cc.tp + cc.fp + cc.fn_ == 0 {
        return Metrics {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            oa: 1.0,
            iou: 1.0,
        };
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Metrics {
        precision,
        recall,
        f1,
        oa: (tp + tn) / (tp + fp + tn + fn_),
        iou: tp / (tp + fp + fn_),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_evaluated_example() {
        let m = metrics(&ConfusionCounts {
            tp: 50,
            fp: 10,
            tn: 30,
            fn_: 10,
        });
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 0.8333).abs() < 1e-4);
        }
        assert!((m.oa - 0.80).abs() < 1e-12);
        assert!((m.iou - 0.7143).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let y = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let m = metrics(&confusion(&y, &y).unwrap());
        assert_eq!((m.precision, m.recall, m.f1, m.oa, m.iou), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(m.percent().to_string().contains("F1: 100.00"));
    }

    #[test]
    fn empty_intersection_conventions() {
        let m = metrics(&ConfusionCounts {
            tp: 0,
            fp: 3,
            tn: 5,
            fn_: 2,
        });
        assert_eq!((m.f1, m.iou, m.precision, m.recall), (0.0, 0.0, 0.0, 0.0));
        let only_fn = metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 5,
            fn_: 2,
        });
        assert_eq!(only_fn.precision, 0.0);
        let pure_tn = metrics(&ConfusionCounts {
            tn: 9,
            ..Default::default()
        });
        assert_eq!(pure_tn.f1, 1.0);
    }

    #[test]
    fn binarize_is_strict() {
        let p = Tensor::new(&[3], vec![0.5, 0.51, 0.2]).unwrap();
        assert_eq!(binarize(&p).data(), &[0.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn f1_iou_identity(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
            prop_assume!(tp + fp + fn_ > 0);
            let m = metrics(&ConfusionCounts { tp, fp, tn, fn_ });
            prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        }
    }
}
