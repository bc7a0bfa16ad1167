//! Hybrid training objective: class-weighted BCE on the final change map
//! plus dice losses on the stage-4/5 intermediate maps.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tape::BCE_CLAMP;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the unchanged class. `None` derives it from the training split.
    pub w0: Option<f64>,
    /// Weight of the changed class. `None` derives it from the training split.
    pub w1: Option<f64>,
    pub lambda: f64,
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w0: None,
            w1: None,
            lambda: 0.1,
            dice_epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w0", self.w0), ("w1", self.w1)] {
            if let Some(w) = w {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(config_err!("loss.{name} must be positive, got {w}"));
                }
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err!("loss.lambda must be >= 0, got {}", self.lambda));
        }
        if self.dice_epsilon.is_nan() || self.dice_epsilon <= 0.0 {
            return Err(config_err!("loss.dice_epsilon must be > 0"));
        }
        Ok(())
    }

    /// Resolves the class weights, filling unset ones from `defaults`.
    pub fn class_weights(&self, defaults: ClassWeights) -> ClassWeights {
        ClassWeights {
            w0: self.w0.unwrap_or(defaults.w0),
            w1: self.w1.unwrap_or(defaults.w1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

/// `w1` = unchanged-pixel fraction, `w0` = changed-pixel fraction, so the
/// rarer class gets the larger weight. Falls back to 1/1 when a class is
/// absent.
pub fn class_weights_from_labels<'a>(labels: impl IntoIterator<Item = &'a Tensor>) -> ClassWeights {
    let (mut changed, mut total) = (0usize, 0usize);
    for l in labels {
        changed += l.data().iter().filter(|&&v| v > 0.5).count();
        total += l.numel();
    }
    if changed == 0 || changed == total {
        return ClassWeights { w0: 1.0, w1: 1.0 };
    }
    let frac = changed as f64 / total as f64;
    ClassWeights {
        w0: frac,
        w1: 1.0 - frac,
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

pub(crate) fn weighted_bce_value(prob: &[f64], label: &[f64], w0: f64, w1: f64) -> f64 {
    let sum: f64 = prob
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            w1 * y * p.ln() + w0 * (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -sum / prob.len() as f64
}

pub(crate) fn dice_value(prob: &[f64], label: &[f64], samples: usize, epsilon: f64) -> f64 {
    let per = prob.len() / samples;
    let total: f64 = (0..samples)
        .map(|s| {
            let p = &prob[s * per..(s + 1) * per];
            let y = &label[s * per..(s + 1) * per];
            let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
            let denom = y.iter().sum::<f64>() + p.iter().sum::<f64>();
            1.0 - (2.0 * inter + epsilon) / (denom + epsilon)
        })
        .sum();
    total / samples as f64
}

fn check_pair(pred: &Tensor, label: &Tensor, what: &str) -> Result<()> {
    if pred.numel() != label.numel() || pred.numel() == 0 {
        return Err(config_err!(
            "{what}: prediction {:?} and label {:?} differ",
            pred.shape(),
            label.shape()
        ));
    }
    if let Some(v) = label.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("{what}: label value {v} is not in {{0,1}}")));
    }
    Ok(())
}

/// `-(1/N) Σ (w1·y·ln p + w0·(1-y)·ln(1-p))` with `p` clamped to
/// `[1e-7, 1-1e-7]`.
pub fn weighted_bce(pred: &Tensor, label: &Tensor, w0: f64, w1: f64) -> Result<f64> {
    check_pair(pred, label, "weighted_bce")?;
    Ok(weighted_bce_value(pred.data(), label.data(), w0, w1))
}

/// Unweighted binary cross-entropy, same clamping.
pub fn bce(pred: &Tensor, label: &Tensor) -> Result<f64> {
    check_pair(pred, label, "bce")?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(label.data())
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / pred.numel() as f64)
}

/// `1 - (2·Σ y·p + ε) / (Σ y + Σ p + ε)` over one map.
pub fn dice_loss(pred: &Tensor, label: &Tensor, epsilon: f64) -> Result<f64> {
    if pred.shape() != label.shape() {
        return Err(config_err!(
            "dice_loss: prediction {:?} and label {:?} differ",
            pred.shape(),
            label.shape()
        ));
    }
    check_pair(pred, label, "dice_loss")?;
    Ok(dice_value(pred.data(), label.data(), 1, epsilon))
}

/// `wbce + λ·(dice4 + dice5)/2`.
pub fn total_loss(wbce: f64, dice4: f64, dice5: f64, lambda: f64) -> f64 {
    wbce + lambda * ((dice4 + dice5) * 0.5)
}

/// Reduces a label to stage `i` resolution (`2^{1-i}` of the input) by
/// taking the max over each `2^{i-1}` window, so any changed pixel marks
/// the window as changed. Accepts `[h,w]`, `[1,h,w]` or `[n,1,h,w]`.
pub fn downsample_label(label: &Tensor, stage: usize) -> Result<Tensor> {
    if !(1..=5).contains(&stage) {
        return Err(config_err!("downsample_label: stage {stage} outside 1..=5"));
    }
    let factor = 1usize << (stage - 1);
    let shape = label.shape();
    let (lead, h, w) = match *shape {
        [h, w] => (Vec::new(), h, w),
        [c, h, w] => (vec![c], h, w),
        [n, c, h, w] => (vec![n, c], h, w),
        _ => return Err(config_err!("downsample_label: unsupported shape {:?}", shape)),
    };
    if h % factor != 0 || w % factor != 0 {
        return Err(config_err!(
            "downsample_label: {h}x{w} is not divisible by {factor} (stage {stage})"
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let planes: usize = lead.iter().product();
    let src = label.data();
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..factor {
                    let row = p * h * w + (oy * factor + dy) * w + ox * factor;
                    for v in &src[row..row + factor] {
                        m = m.max(*v);
                    }
                }
                out[p * ho * wo + oy * wo + ox] = m;
            }
        }
    }
    let mut new_shape = lead;
    new_shape.extend([ho, wo]);
    Tensor::new(&new_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn wbce_single_pixel_hand_value() {
        let l = weighted_bce(&t(&[1, 1], &[0.5]), &t(&[1, 1], &[1.0]), 1.0, 2.0).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn wbce_perfect_prediction_near_zero() {
        let y = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let l = weighted_bce(&y, &y, 1.0, 1.0).unwrap();
        let bound = (1.0 / (1.0 - BCE_CLAMP)).ln();
        assert!(l <= bound + 1e-15, "{l}");
    }

    #[test]
    fn wbce_rejects_non_binary_labels() {
        assert!(weighted_bce(&t(&[1], &[0.5]), &t(&[1], &[0.5]), 1.0, 1.0).is_err());
    }

    #[test]
    fn dice_examples() {
        let y = t(&[1, 2], &[1.0, 0.0]);
        let p = t(&[1, 2], &[0.5, 0.5]);
        assert!((dice_loss(&p, &y, 1e-12).unwrap() - 0.5).abs() < 1e-9);
        let zeros = t(&[2, 2], &[0.0; 4]);
        assert_eq!(dice_loss(&zeros, &zeros, 1e-6).unwrap(), 0.0);
        let y = t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]);
        assert!(dice_loss(&y, &y, 1e-6).unwrap().abs() < 1e-9);
        assert!(dice_loss(&t(&[4], &[0.0; 4]), &y, 1e-6).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.37, 0.9, 0.2, 0.0), 0.37);
        assert_eq!(total_loss(0.5, 0.25, 0.25, 1.0), 0.75);
        assert!((total_loss(0.5, 0.2, 0.4, 0.1) - 0.53).abs() < 1e-12);
    }

    #[test]
    fn label_downsampling_shapes_and_max_rule() {
        let mut data = vec![0.0; 256 * 256];
        data[0] = 1.0;
        let label = t(&[256, 256], &data);
        let d4 = downsample_label(&label, 4).unwrap();
        assert_eq!(d4.shape(), &[32, 32]);
        assert_eq!(d4.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(d4.at(&[0, 0]), 1.0);
        assert_eq!(downsample_label(&label, 5).unwrap().shape(), &[16, 16]);
        let ones = Tensor::ones(&[1, 1, 32, 32]);
        assert!(downsample_label(&ones, 4).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(downsample_label(&t(&[12, 12], &[0.0; 144]), 4).is_err());
    }

    #[test]
    fn class_weights_favor_rare_class() {
        let y = t(&[4], &[1.0, 0.0, 0.0, 0.0]);
        let cw = class_weights_from_labels([&y]);
        assert_eq!((cw.w0, cw.w1), (0.25, 0.75));
    }

    proptest! {
        #[test]
        fn unit_weights_equal_plain_bce(
            vals in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)
        ) {
            let p: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let y: Vec<f64> = vals.iter().map(|v| if v.1 { 1.0 } else { 0.0 }).collect();
            let (p, y) = (t(&[p.len()], &p), t(&[y.len()], &y));
            prop_assert_eq!(
                weighted_bce(&p, &y, 1.0, 1.0).unwrap().to_bits(),
                bce(&p, &y).unwrap().to_bits()
            );
        }

        #[test]
        fn dice_in_unit_interval(
            vals in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40)
        ) {
            let p: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let y: Vec<f64> = vals.iter().map(|v| if v.1 { 1.0 } else { 0.0 }).collect();
            let d = dice_loss(&t(&[p.len()], &p), &t(&[y.len()], &y), 1e-6).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d));
        }

        #[test]
        fn total_loss_monotone(
            w in 0.0f64..5.0, d4 in 0.0f64..1.0, d5 in 0.0f64..1.0,
            lambda in 0.0f64..10.0, bump in 0.0f64..1.0
        ) {
            let base = total_loss(w, d4, d5, lambda);
            prop_assert!(total_loss(w + bump, d4, d5, lambda) >= base);
            prop_assert!(total_loss(w, d4 + bump, d5, lambda) >= base);
            prop_assert!(total_loss(w, d4, d5 + bump, lambda) >= base);
        }
    }
}
