//! Segmentation (dice + BCE) and reconstruction (MSE) losses.
//!
//! Both operate on tensors whose first dimension is the batch; all remaining
//! dimensions are flattened into pixels.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Dice smoothing term `s`.
    pub smoothing: f64,
    /// Predictions are clamped to `[eps, 1 - eps]` inside the BCE logarithms.
    pub bce_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smoothing: 1.0,
            bce_epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing > 0.0) {
            return Err(Error::config("loss.smoothing", "must be positive"));
        }
        if !(self.bce_epsilon > 0.0 && self.bce_epsilon < 0.5) {
            return Err(Error::config("loss.bce_epsilon", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

fn batch_rows(t: &Tensor) -> Result<Tensor> {
    let n = t.dims().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Shape("loss input has an empty batch".into()));
    }
    Ok(t.reshape((n, ()))?)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn range_of(t: &Tensor) -> Result<(f64, f64)> {
    let flat = t.flatten_all()?.to_dtype(DType::F64)?;
    Ok((flat.min(0)?.to_scalar()?, flat.max(0)?.to_scalar()?))
}

/// The two terms of the segmentation loss, kept apart for reporting.
pub struct SegLossParts {
    pub dice: Tensor,
    pub bce: Tensor,
}

impl SegLossParts {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.dice + &self.bce)?)
    }
}

/// Dice term averaged per sample plus BCE averaged over every pixel of every sample.
pub fn seg_loss_parts(labels: &Tensor, probs: &Tensor, cfg: &LossConfig) -> Result<SegLossParts> {
    check_same_shape(labels, probs, "segmentation loss labels and predictions differ")?;
    let (lo, hi) = range_of(probs)?;
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::InvalidValue(format!(
            "predicted probabilities span [{lo}, {hi}], outside [0, 1]"
        )));
    }
    let labels = batch_rows(&labels.to_dtype(probs.dtype())?)?;
    let probs = batch_rows(probs)?;

    let s = cfg.smoothing;
    let inter = (&labels * &probs)?.sum(1)?;
    let denom = ((labels.sum(1)? + probs.sum(1)?)? + s)?;
    let dice_per_sample = ((inter * 2.0)? + s)?.div(&denom)?;
    let dice = (1.0 - dice_per_sample.mean_all()?)?;

    let eps = cfg.bce_epsilon;
    let clamped = probs.clamp(eps, 1.0 - eps)?;
    let pos = (&labels * clamped.log()?)?;
    let neg = ((1.0 - &labels)? * (1.0 - &clamped)?.log()?)?;
    let bce = (pos + neg)?.mean_all()?.neg()?;
    Ok(SegLossParts { dice, bce })
}

pub fn seg_loss(labels: &Tensor, probs: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    seg_loss_parts(labels, probs, cfg)?.total()
}

/// Mean squared error normalized by pixel count and batch size.
pub fn rec_loss(target: &Tensor, reconstruction: &Tensor) -> Result<Tensor> {
    check_same_shape(target, reconstruction, "reconstruction target and output differ")?;
    Ok((target - reconstruction)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn four_pixel_fixture() {
        let cfg = LossConfig::default();
        let parts = seg_loss_parts(&t(&[1., 1., 0., 0.], (1, 4)), &t(&[1., 0., 0., 0.], (1, 4)), &cfg).unwrap();
        assert!((scalar(&parts.dice) - 0.25).abs() < 1e-12);
        let eps = cfg.bce_epsilon;
        let expected_bce = -((1.0 - eps).ln() * 3.0 + eps.ln()) / 4.0;
        assert!((scalar(&parts.bce) - expected_bce).abs() < 1e-12);
        assert!((scalar(&parts.bce) + 0.25 * eps.ln()).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let cfg = LossConfig::default();
        let l = t(&[1., 0., 1., 1., 0., 0.], (2, 3));
        let parts = seg_loss_parts(&l, &l, &cfg).unwrap();
        // per sample dice loss <= s / (2|l| + s)
        assert!(scalar(&parts.dice) <= 1.0 / 3.0 + 1e-12);
        assert!(scalar(&parts.bce) <= -(1.0 - cfg.bce_epsilon).ln() + 1e-12);
        let big = t(&vec![1.0; 400], (1, 400));
        assert!(scalar(&seg_loss(&big, &big, &cfg).unwrap()) < 2e-3);
    }

    #[test]
    fn worst_prediction() {
        let cfg = LossConfig::default();
        let l = t(&[1., 1., 0., 0., 0., 0., 0., 0.], (1, 8));
        let m = t(&[0., 0., 1., 1., 1., 1., 1., 1.], (1, 8));
        let parts = seg_loss_parts(&l, &m, &cfg).unwrap();
        // 1 - s / (|l| + |1-l| + s) = 1 - 1/9
        assert!((scalar(&parts.dice) - (1.0 - 1.0 / 9.0)).abs() < 1e-12);
        assert!((scalar(&parts.bce) + cfg.bce_epsilon.ln()).abs() < 1e-6);
    }

    #[test]
    fn rec_fixtures() {
        let x = t(&[0.5, 0.0, 0.0, 0.0], (1, 4));
        let zero = t(&[0.0; 4], (1, 4));
        assert!((scalar(&rec_loss(&x, &zero).unwrap()) - 0.0625).abs() < 1e-12);
        assert_eq!(scalar(&rec_loss(&x, &x).unwrap()), 0.0);
        let ones = t(&[1.0; 8], (2, 4));
        let zeros = t(&[0.0; 8], (2, 4));
        assert_eq!(scalar(&rec_loss(&zeros, &ones).unwrap()), 1.0);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let cfg = LossConfig::default();
        let l = t(&[1., 0.], (1, 2));
        assert!(matches!(seg_loss(&l, &t(&[1., 0., 0.], (1, 3)), &cfg), Err(Error::Shape(_))));
        assert!(matches!(seg_loss(&l, &t(&[1.2, 0.], (1, 2)), &cfg), Err(Error::InvalidValue(_))));
        assert!(rec_loss(&l, &t(&[1., 0., 0.], (1, 3))).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        cfg.bce_epsilon = 0.7;
        assert!(cfg.validate().is_err());
        cfg = LossConfig {
            smoothing: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
