//! Training objective: binary cross-entropy, soft Dice, and their
//! weighted composite.
//!
//! All losses operate on a probability map and a binary annotation of
//! identical shape. Dice is global (one overlap ratio per image, not
//! per-pixel), with additive smoothing in numerator and denominator.
//! The composite is `lambda1 * bce + lambda2 * dice`; analytic
//! gradients with respect to the probability map are provided for the
//! backward pass.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to predictions inside the BCE logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Weighting of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub dice_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 0.5, dice_smoothing: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got lambda1={}, lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.dice_smoothing > 0.0) || !self.dice_smoothing.is_finite() {
            return Err(Error::Config(format!(
                "dice smoothing must be a positive real, got {}",
                self.dice_smoothing
            )));
        }
        Ok(())
    }

    /// Pure-BCE variant (the "BC" ablation arm).
    pub fn bce_only() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 0.0, ..Default::default() }
    }

    /// Pure-Dice variant (the "D" ablation arm).
    pub fn dice_only() -> Self {
        LossWeights { lambda1: 0.0, lambda2: 0.5, ..Default::default() }
    }
}

/// Scalar components of one composite evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

fn check_shapes(pred: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::InvalidInput(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty prediction map".into()));
    }
    Ok(())
}

fn check_pred_range(pred: &Array2<f64>) -> Result<()> {
    if !pred.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)) {
        return Err(Error::InvalidInput(
            "prediction entries must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

fn check_binary(name: &str, m: &Array2<f64>) -> Result<()> {
    if !m.iter().all(|v| *v == 0.0 || *v == 1.0) {
        return Err(Error::InvalidInput(format!("{name} must be strictly binary")));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy. With a validity mask only pixels where the
/// mask is 1 enter the mean; `mask = None` averages over every pixel.
pub fn bce_loss(pred: &Array2<f64>, target: &Array2<f64>, mask: Option<&Array2<f64>>) -> Result<f64> {
    check_shapes(pred, target)?;
    check_pred_range(pred)?;
    check_binary("target", target)?;
    if let Some(m) = mask {
        if m.dim() != pred.dim() {
            return Err(Error::InvalidInput(format!(
                "mask shape {:?} does not match prediction shape {:?}",
                m.dim(),
                pred.dim()
            )));
        }
        check_binary("mask", m)?;
    }

    let mut sum = 0.0;
    let mut n = 0.0;
    let mut add = |p: f64, t: f64| {
        let pc = clamp(p);
        sum += -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        n += 1.0;
    };
    match mask {
        Some(m) => {
            for ((&p, &t), &mv) in pred.iter().zip(target.iter()).zip(m.iter()) {
                if mv != 0.0 {
                    add(p, t);
                }
            }
        }
        None => {
            for (&p, &t) in pred.iter().zip(target.iter()) {
                add(p, t);
            }
        }
    }
    if n == 0.0 {
        return Err(Error::InvalidInput(
            "validity mask excludes every pixel".into(),
        ));
    }
    Ok(sum / n)
}

/// Global soft Dice loss: 1 − (2·Σpt + s) / (Σp + Σt + s).
///
/// `smoothing` may be zero (the raw ratio); the degenerate 0/0 case of
/// two empty maps counts as perfect overlap.
pub fn dice_loss(pred: &Array2<f64>, target: &Array2<f64>, smoothing: f64) -> Result<f64> {
    check_shapes(pred, target)?;
    check_pred_range(pred)?;
    check_binary("target", target)?;
    if !smoothing.is_finite() || smoothing < 0.0 {
        return Err(Error::Config(format!(
            "dice smoothing must be finite and nonnegative, got {smoothing}"
        )));
    }
    let inter: f64 = pred.iter().zip(target.iter()).map(|(p, t)| p * t).sum();
    let psum: f64 = pred.sum();
    let tsum: f64 = target.sum();
    let num = 2.0 * inter + smoothing;
    let den = psum + tsum + smoothing;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - num / den)
}

/// Weighted composite: `lambda1 * bce + lambda2 * dice`.
pub fn composite_loss(pred: &Array2<f64>, target: &Array2<f64>, w: &LossWeights) -> Result<f64> {
    Ok(composite_parts(pred, target, w)?.total)
}

/// Composite with both components reported, for logging.
pub fn composite_parts(pred: &Array2<f64>, target: &Array2<f64>, w: &LossWeights) -> Result<LossParts> {
    w.validate()?;
    let bce = bce_loss(pred, target, None)?;
    let dice = dice_loss(pred, target, w.dice_smoothing)?;
    Ok(LossParts { bce, dice, total: w.lambda1 * bce + w.lambda2 * dice })
}

/// Analytic gradient of the composite loss with respect to `pred`.
///
/// Pixels clamped by the BCE epsilon contribute zero BCE gradient (the
/// clamp is constant there); the Dice term is differentiable everywhere.
pub fn composite_grad(pred: &Array2<f64>, target: &Array2<f64>, w: &LossWeights) -> Result<Array2<f64>> {
    w.validate()?;
    check_shapes(pred, target)?;
    check_pred_range(pred)?;
    check_binary("target", target)?;

    let n = pred.len() as f64;
    let inter: f64 = pred.iter().zip(target.iter()).map(|(p, t)| p * t).sum();
    let num = 2.0 * inter + w.dice_smoothing;
    let den = pred.sum() + target.sum() + w.dice_smoothing;

    let mut g = Array2::<f64>::zeros(pred.raw_dim());
    ndarray::Zip::from(&mut g).and(pred).and(target).for_each(|gi, &p, &t| {
        let mut acc = 0.0;
        if w.lambda1 > 0.0 && p > BCE_EPS && p < 1.0 - BCE_EPS {
            acc += w.lambda1 * (-(t / p) + (1.0 - t) / (1.0 - p)) / n;
        }
        if w.lambda2 > 0.0 && den > 0.0 {
            acc += w.lambda2 * (-(2.0 * t * den - num) / (den * den));
        }
        *gi = acc;
    });
    Ok(g)
}
