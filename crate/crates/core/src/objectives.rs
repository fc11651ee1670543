//! Training objectives: weighted binary cross-entropy for clip/frame models
//! and the focal + Dice combination for pixel-level heatmaps.
//!
//! Every loss comes with its analytic gradient with respect to the predicted
//! probabilities. Probabilities entering a logarithm are clamped to
//! `[PROB_CLAMP, 1 - PROB_CLAMP]`; gradients are evaluated at the clamped
//! value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Dice share of the combined loss.
    pub alpha: f64,
    /// Focusing exponent.
    pub gamma: f64,
    /// Foreground weight of the focal term.
    pub beta: f64,
    /// Dice smoothing term.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0 / 3.0,
            gamma: 2.0,
            beta: 50.0,
            epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.beta > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("beta and epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_weight(weight: f64) -> Result<()> {
    if weight > 0.0 && weight.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidWeight(weight))
    }
}

fn check_shapes(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "target has {} pixels, prediction has {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::ShapeMismatch("empty maps".into()));
    }
    Ok(())
}

/// `-w * (y ln p + (1 - y) ln(1 - p))`
pub fn bce_loss(y: f64, y_hat: f64, weight: f64) -> Result<f64> {
    check_weight(weight)?;
    let p = clamp_prob(y_hat);
    Ok(-weight * (y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// Derivative of [`bce_loss`] with respect to `y_hat`.
pub fn bce_grad(y: f64, y_hat: f64, weight: f64) -> Result<f64> {
    check_weight(weight)?;
    let p = clamp_prob(y_hat);
    Ok(-weight * (y / p - (1.0 - y) / (1.0 - p)))
}

/// Pixel-mean focal loss with foreground weight:
/// `-w * mean(beta (1-p)^g y ln p + p^g (1-y) ln(1-p))`.
pub fn focal_loss(y: &[f64], y_hat: &[f64], weight: f64, cfg: &LossConfig) -> Result<f64> {
    check_weight(weight)?;
    check_shapes(y, y_hat)?;
    let g = cfg.gamma;
    let sum: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&t, &p)| {
            let p = clamp_prob(p);
            cfg.beta * (1.0 - p).powf(g) * t * p.ln() + p.powf(g) * (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-weight * sum / y.len() as f64)
}

/// [`focal_loss`] value and its gradient with respect to every `y_hat` pixel.
pub fn focal_loss_grad(
    y: &[f64],
    y_hat: &[f64],
    weight: f64,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let value = focal_loss(y, y_hat, weight, cfg)?;
    let g = cfg.gamma;
    let scale = -weight / y.len() as f64;
    let grad = y
        .iter()
        .zip(y_hat)
        .map(|(&t, &p)| {
            let p = clamp_prob(p);
            let q = 1.0 - p;
            // d/dp [beta q^g ln p]
            let fg = if g == 0.0 {
                cfg.beta / p
            } else {
                cfg.beta * (-g * q.powf(g - 1.0) * p.ln() + q.powf(g) / p)
            };
            // d/dp [p^g ln q]
            let bg = if g == 0.0 {
                -1.0 / q
            } else {
                g * p.powf(g - 1.0) * q.ln() - p.powf(g) / q
            };
            scale * (t * fg + (1.0 - t) * bg)
        })
        .collect();
    Ok((value, grad))
}

/// `w * (1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps))`
pub fn dice_loss(y: &[f64], y_hat: &[f64], weight: f64, epsilon: f64) -> Result<f64> {
    check_weight(weight)?;
    check_shapes(y, y_hat)?;
    let (inter, total) = dice_sums(y, y_hat);
    Ok(weight * (1.0 - (2.0 * inter + epsilon) / (total + epsilon)))
}

fn dice_sums(y: &[f64], y_hat: &[f64]) -> (f64, f64) {
    y.iter()
        .zip(y_hat)
        .fold((0.0, 0.0), |(i, s), (&t, &p)| (i + t * p, s + t + p))
}

pub fn dice_loss_grad(
    y: &[f64],
    y_hat: &[f64],
    weight: f64,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    let value = dice_loss(y, y_hat, weight, epsilon)?;
    let (inter, total) = dice_sums(y, y_hat);
    let num = 2.0 * inter + epsilon;
    let den = total + epsilon;
    let grad = y
        .iter()
        .map(|&t| -weight * (2.0 * t * den - num) / (den * den))
        .collect();
    Ok((value, grad))
}

/// `alpha * dice + (1 - alpha) * focal`
pub fn seg_loss(y: &[f64], y_hat: &[f64], weight: f64, cfg: &LossConfig) -> Result<f64> {
    let dice = dice_loss(y, y_hat, weight, cfg.epsilon)?;
    let focal = focal_loss(y, y_hat, weight, cfg)?;
    Ok(cfg.alpha * dice + (1.0 - cfg.alpha) * focal)
}

pub fn seg_loss_grad(
    y: &[f64],
    y_hat: &[f64],
    weight: f64,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (dice, dg) = dice_loss_grad(y, y_hat, weight, cfg.epsilon)?;
    let (focal, fg) = focal_loss_grad(y, y_hat, weight, cfg)?;
    let a = cfg.alpha;
    let grad = dg.iter().zip(&fg).map(|(d, f)| a * d + (1.0 - a) * f).collect();
    Ok((a * dice + (1.0 - a) * focal, grad))
}

/// Batch reduction: `sum_i(loss_i) / sum_i(w_i)` where every `loss_i` already
/// carries its weight `w_i`.
pub fn batch_loss(weighted_losses: &[f64], weights: &[f64]) -> Result<f64> {
    let total_weight: f64 = weights.iter().sum();
    if !(total_weight > 0.0) {
        return Err(Error::InvalidWeight(total_weight));
    }
    Ok(weighted_losses.iter().sum::<f64>() / total_weight)
}
