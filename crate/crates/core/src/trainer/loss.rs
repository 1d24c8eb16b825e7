//! Tversky index and Focal Tversky loss over class-probability rows.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::TrainError;

/// Lower clamp on `1 - TI` inside the gradient of `(1 - TI)^(1/gamma)`.
pub const FTL_GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on false negatives.
    pub alpha: f64,
    /// Weight on false positives.
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(TrainError::InvalidConfig("alpha and beta must be non-negative".into()));
        }
        if !(self.gamma >= 1.0) {
            return Err(TrainError::InvalidConfig("gamma must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn check_shapes(predictions: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<(), TrainError> {
    if predictions.dim() != labels.dim() {
        return Err(TrainError::CountMismatch {
            predictions: predictions.nrows(),
            labels: labels.nrows(),
        });
    }
    if predictions.nrows() == 0 {
        return Err(TrainError::CountMismatch {
            predictions: 0,
            labels: 0,
        });
    }
    Ok(())
}

struct TverskyTerms {
    tp: f64,
    fn_: f64,
    fp: f64,
}

fn terms(predictions: ArrayView2<f64>, labels: ArrayView2<f64>, class: usize) -> TverskyTerms {
    let mut t = TverskyTerms {
        tp: 0.0,
        fn_: 0.0,
        fp: 0.0,
    };
    for (p, y) in predictions.column(class).iter().zip(labels.column(class)) {
        t.tp += p * y;
        t.fn_ += (1.0 - p) * y;
        t.fp += p * (1.0 - y);
    }
    t
}

/// TI_c = (1 + TP + eps) / (1 + TP + alpha FN + beta FP + eps).
pub fn tversky_index(
    predictions: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    class: usize,
    config: &LossConfig,
) -> Result<f64, TrainError> {
    check_shapes(predictions, labels)?;
    let t = terms(predictions, labels, class);
    let num = 1.0 + t.tp + config.epsilon;
    Ok(num / (num + config.alpha * t.fn_ + config.beta * t.fp))
}

/// Sum over classes of `(1 - TI_c)^(1/gamma)` and its gradient with respect to
/// every prediction entry.
pub fn focal_tversky_loss(
    predictions: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    config: &LossConfig,
) -> Result<(f64, Array2<f64>), TrainError> {
    check_shapes(predictions, labels)?;
    let exponent = 1.0 / config.gamma;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(predictions.raw_dim());
    for c in 0..predictions.ncols() {
        let t = terms(predictions, labels, c);
        let num = 1.0 + t.tp + config.epsilon;
        let den = num + config.alpha * t.fn_ + config.beta * t.fp;
        let ti = num / den;
        let gap = 1.0 - ti;
        if gap > 0.0 {
            loss += gap.powf(exponent);
        }
        // d/dTI of (1 - TI)^(1/gamma)
        let d_ti = -exponent * gap.max(FTL_GRAD_FLOOR).powf(exponent - 1.0);
        for (i, &y) in labels.column(c).iter().enumerate() {
            let d_num = y;
            let d_den = y - config.alpha * y + config.beta * (1.0 - y);
            grad[[i, c]] = d_ti * (d_num * den - num * d_den) / (den * den);
        }
    }
    Ok((loss, grad))
}
