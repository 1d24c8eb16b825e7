use serde::{Deserialize, Serialize};

use super::metrics::{call, confusion_metrics, mean_of, std_of, ConfusionMetrics, StdEstimator};
use super::EvalError;
use crate::embedstore::Grade;

/// Interval of p_HG values treated as non-confident:
/// `(mean_LG + sd_LG, mean_HG - sd_HG)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBand {
    pub lower: f64,
    pub upper: f64,
    /// `lower < upper`; when false nothing is excluded.
    pub non_empty: bool,
}

impl UncertaintyBand {
    /// Strictly inside the open interval.
    pub fn contains(&self, p_hg: f64) -> bool {
        self.non_empty && p_hg > self.lower && p_hg < self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub band: UncertaintyBand,
    pub full: ConfusionMetrics,
    /// Indices of predictions outside the band.
    pub retained: Vec<usize>,
    pub n_excluded: usize,
    /// `None` when every prediction falls inside the band.
    pub retained_metrics: Option<ConfusionMetrics>,
}

pub fn uncertainty_band(scores: &[f64], labels: &[Grade], estimator: StdEstimator) -> Result<BandReport, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::CountMismatch {
            predicted: scores.len(),
            labels: labels.len(),
        });
    }
    let by_class = |g: Grade| -> Vec<f64> {
        scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == g)
            .map(|(&s, _)| s)
            .collect()
    };
    let lg = by_class(Grade::Low);
    let hg = by_class(Grade::High);
    if lg.is_empty() || hg.is_empty() {
        return Err(EvalError::SingleClass);
    }
    let lower = mean_of(&lg) + std_of(&lg, estimator);
    let upper = mean_of(&hg) - std_of(&hg, estimator);
    let band = UncertaintyBand {
        lower,
        upper,
        non_empty: lower < upper,
    };
    let predicted: Vec<Grade> = scores.iter().map(|&p| call(p)).collect();
    let full = confusion_metrics(&predicted, labels)?;
    let retained: Vec<usize> = (0..scores.len()).filter(|&i| !band.contains(scores[i])).collect();
    let retained_metrics = if retained.is_empty() {
        None
    } else {
        let p: Vec<Grade> = retained.iter().map(|&i| predicted[i]).collect();
        let y: Vec<Grade> = retained.iter().map(|&i| labels[i]).collect();
        Some(confusion_metrics(&p, &y)?)
    };
    Ok(BandReport {
        band,
        full,
        n_excluded: scores.len() - retained.len(),
        retained,
        retained_metrics,
    })
}
