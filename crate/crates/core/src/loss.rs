//! Classification and box-regression objectives.
//!
//! Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm. The
//! logit-space gradients treat the clamp as part of the function, so they
//! are zero where it is active.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::sigmoid;

pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: 2.0, alpha: 0.25 }
    }
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: f64) -> Result<Self> {
        let fp = FocalParams { gamma, alpha };
        fp.validate()?;
        Ok(fp)
    }

    /// Settings under which the focal loss is plain cross-entropy.
    pub fn cross_entropy() -> Self {
        FocalParams { gamma: 0.0, alpha: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::invalid("y", format!("binary target must be 0 or 1, got {y}")));
    }
    Ok(())
}

/// Probability assigned to the true class, after clamping.
fn p_true(p: f64, y: u8) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    if y == 1 {
        p
    } else {
        1.0 - p
    }
}

/// `-ln(pt)` with `pt = p` for a positive and `1 - p` for a negative.
pub fn cross_entropy(p: f64, y: u8) -> Result<f64> {
    check_label(y)?;
    Ok(-p_true(p, y).ln())
}

/// `-alpha (1 - pt)^gamma ln(pt)`.
pub fn focal_loss(p: f64, y: u8, fp: FocalParams) -> Result<f64> {
    check_label(y)?;
    fp.validate()?;
    let pt = p_true(p, y);
    Ok(-fp.alpha * (1.0 - pt).powf(fp.gamma) * pt.ln())
}

/// Focal loss of the sigmoid of `logit` and its derivative in the logit.
pub fn focal_loss_logit(logit: f64, y: u8, fp: FocalParams) -> Result<(f64, f64)> {
    let p = sigmoid(logit);
    let loss = focal_loss(p, y, fp)?;
    if !(EPS..=1.0 - EPS).contains(&p) {
        return Ok((loss, 0.0));
    }
    let pt = p_true(p, y);
    let q = 1.0 - pt;
    // d loss / d pt times d pt / d logit, with pt (1 - pt) folded in
    let d = fp.alpha * (fp.gamma * q.powf(fp.gamma) * pt * pt.ln() - q.powf(fp.gamma + 1.0));
    let sign = if y == 1 { 1.0 } else { -1.0 };
    Ok((loss, sign * d))
}

/// Smooth-L1 of a single difference: quadratic below `beta`, linear above.
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Summed smooth-L1 (`beta = 1`) between predicted and target deltas.
pub fn box_regression_loss(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| smooth_l1(p - t, 1.0)).sum()
}

/// Gradient of [`box_regression_loss`] with respect to `pred`.
pub fn box_regression_grad(pred: &[f64; 4], target: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|i| smooth_l1_grad(pred[i] - target[i], 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn cross_entropy_reference_values() {
        assert!((cross_entropy(0.5, 1).unwrap() - LN_2).abs() < 1e-15);
        assert!((cross_entropy(0.5, 0).unwrap() - LN_2).abs() < 1e-15);
        assert!((cross_entropy(0.2, 0).unwrap() - 0.223_143_551_314_209_7).abs() < 1e-12);
        assert!(cross_entropy(1.0 - 1e-9, 1).unwrap() < 1e-6);
        assert!(cross_entropy(0.0, 1).unwrap().is_finite());
        assert!(cross_entropy(0.5, 2).is_err());
    }

    #[test]
    fn focal_reference_values() {
        let fp = FocalParams::new(2.0, 1.0).unwrap();
        assert!((focal_loss(0.5, 1, fp).unwrap() - 0.25 * LN_2).abs() < 1e-12);
        assert!(focal_loss(1.0, 1, fp).unwrap() < 1e-20);
        assert!(FocalParams::new(-1.0, 0.5).is_err());
        assert!(FocalParams::new(1.0, 0.0).is_err());
        let ce = FocalParams::cross_entropy();
        for p in [0.01, 0.3, 0.77] {
            for y in [0, 1] {
                assert_eq!(focal_loss(p, y, ce).unwrap(), cross_entropy(p, y).unwrap());
            }
        }
    }

    #[test]
    fn smooth_l1_reference_values() {
        assert_eq!(box_regression_loss(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), 0.0);
        assert_eq!(box_regression_loss(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]), 0.125);
        assert_eq!(box_regression_loss(&[0.0, 0.0, 2.0, 0.0], &[0.0; 4]), 1.5);
        assert_eq!(box_regression_grad(&[0.5, -3.0, 0.0, 2.0], &[0.0; 4]), [0.5, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn logit_gradient_matches_central_difference() {
        let h = 1e-5;
        for fp in [FocalParams::default(), FocalParams::cross_entropy(), FocalParams::new(1.5, 0.6).unwrap()] {
            for t in [-3.0, -0.4, 0.0, 0.9, 4.0] {
                for y in [0, 1] {
                    let (_, g) = focal_loss_logit(t, y, fp).unwrap();
                    let num = (focal_loss_logit(t + h, y, fp).unwrap().0 - focal_loss_logit(t - h, y, fp).unwrap().0)
                        / (2.0 * h);
                    assert!((g - num).abs() <= 1e-6 * g.abs().max(num.abs()).max(1e-3), "t={t} y={y}");
                }
            }
        }
    }

    #[test]
    fn clamped_region_has_zero_gradient() {
        assert_eq!(focal_loss_logit(40.0, 0, FocalParams::default()).unwrap().1, 0.0);
    }
}
