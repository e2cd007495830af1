//! Training loss on (B, 3, H, W) probability maps: per-class cross entropy
//! plus a soft Dice term over the three foreground classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeMode {
    /// Positive term only: `−y·log p`.
    Verbatim,
    /// Two-term binary cross entropy.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub ce_mode: CeMode,
    pub ce_weight: f64,
    pub dice_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { epsilon: 1.0, ce_mode: CeMode::Binary, ce_weight: 1.0, dice_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Network(format!("loss epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.ce_weight >= 0.0 && self.dice_weight >= 0.0) {
            return Err(Error::Network("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Loss terms of one batch, plus raw per-class overlap sums for pooled
/// Dice reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
    /// Σ p·y per class over the batch.
    pub intersection: [f64; 3],
    /// Σ p per class over the batch.
    pub predicted: [f64; 3],
    /// Σ y per class over the batch.
    pub truth: [f64; 3],
}

fn check<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>) -> Result<(usize, usize)> {
    if p.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("probabilities {:?} vs targets {:?}", p.shape(), y.shape())));
    }
    let s = p.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::ShapeMismatch(format!("expected (B, 3, H, W), got {s:?}")));
    }
    Ok((s[0], s[2] * s[3]))
}

#[inline]
fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[inline]
fn ce_term(mode: CeMode, p: f64, y: f64) -> f64 {
    let q = clamp(p);
    match mode {
        CeMode::Verbatim => -y * q.ln(),
        CeMode::Binary => -(y * q.ln() + (1.0 - y) * (1.0 - q).ln()),
    }
}

#[inline]
fn ce_slope(mode: CeMode, p: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    match mode {
        CeMode::Verbatim => -y / p,
        CeMode::Binary => -(y / p - (1.0 - y) / (1.0 - p)),
    }
}

/// Σ over classes of the mean pixelwise cross entropy.
pub fn cross_entropy<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    check(p, y)?;
    Ok(evaluate(p, y, cfg, false)?.0.ce)
}

/// Σ over classes of `1 − (2Σpy + ε)/(Σp + Σy + ε)`, per sample, batch mean.
pub fn dice_loss<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    check(p, y)?;
    Ok(evaluate(p, y, cfg, false)?.0.dice)
}

pub fn total_loss<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    Ok(evaluate(p, y, cfg, false)?.0.total)
}

/// Loss value and its gradient with respect to `p`.
pub fn total_loss_with_grad<T: Scalar>(
    p: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let (b, g) = evaluate(p, y, cfg, true)?;
    Ok((b, g.expect("gradient requested")))
}

fn evaluate<T: Scalar>(
    p: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Tensor<T>>)> {
    let (batch, plane) = check(p, y)?;
    let n = (batch * plane) as f64;
    let eps = cfg.epsilon;
    let pd = p.data();
    let yd = y.data();
    let mut ce = 0.0;
    let mut dice = 0.0;
    let mut inter_all = [0.0; 3];
    let mut pred_all = [0.0; 3];
    let mut truth_all = [0.0; 3];
    let mut grad = want_grad.then(|| vec![T::zero(); pd.len()]);
    for b in 0..batch {
        for k in 0..3 {
            let off = (b * 3 + k) * plane;
            let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
            for i in off..off + plane {
                let (pv, yv) = (pd[i].as_f64(), yd[i].as_f64());
                ce += ce_term(cfg.ce_mode, pv, yv) / n;
                inter += pv * yv;
                ps += pv;
                ys += yv;
            }
            let denom = ps + ys + eps;
            dice += (1.0 - (2.0 * inter + eps) / denom) / batch as f64;
            inter_all[k] += inter;
            pred_all[k] += ps;
            truth_all[k] += ys;
            if let Some(g) = grad.as_mut() {
                let num = 2.0 * inter + eps;
                for i in off..off + plane {
                    let (pv, yv) = (pd[i].as_f64(), yd[i].as_f64());
                    let d_dice = -(2.0 * yv * denom - num) / (denom * denom) / batch as f64;
                    let d_ce = ce_slope(cfg.ce_mode, pv, yv) / n;
                    g[i] = T::from_f64(cfg.ce_weight * d_ce + cfg.dice_weight * d_dice);
                }
            }
        }
    }
    let breakdown = LossBreakdown {
        ce,
        dice,
        total: cfg.ce_weight * ce + cfg.dice_weight * dice,
        intersection: inter_all,
        predicted: pred_all,
        truth: truth_all,
    };
    Ok((breakdown, grad.map(|g| Tensor::from_vec(p.shape(), g))))
}

/// Pooled soft Dice coefficient per class from accumulated sums.
pub fn pooled_soft_dice(intersection: [f64; 3], predicted: [f64; 3], truth: [f64; 3], epsilon: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| (2.0 * intersection[k] + epsilon) / (predicted[k] + truth[k] + epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_is_zero_outside_the_clamp() {
        assert_eq!(ce_slope(CeMode::Binary, 0.0, 1.0), 0.0);
        assert_eq!(ce_slope(CeMode::Binary, 1.0, 0.0), 0.0);
        assert!(ce_slope(CeMode::Binary, 0.5, 1.0) < 0.0);
    }

    #[test]
    fn clamp_bounds_saturated_terms() {
        let worst = ce_term(CeMode::Binary, 0.0, 1.0);
        assert!((worst - (-PROB_CLAMP.ln())).abs() < 1e-12);
    }
}
