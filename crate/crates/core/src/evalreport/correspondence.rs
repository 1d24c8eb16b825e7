use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{call, confusion_metrics, ConfusionMetrics};
use super::{EvalError, SlidePrediction};
use crate::embedstore::{Grade, RegionAnnotation};

/// Region-level agreement with annotations under the two scoring modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    pub n_regions: usize,
    /// Region called HG iff it carries the slide's largest region attention.
    pub attention: ConfusionMetrics,
    /// Region called HG iff its own p_HG is at least 0.5.
    pub prediction: ConfusionMetrics,
}

/// Region ids holding the maximum attention within each slide; ties all count.
fn argmax_regions(p: &SlidePrediction) -> Vec<usize> {
    let max = p.regions.iter().map(|r| r.attention).fold(f64::NEG_INFINITY, f64::max);
    p.regions.iter().filter(|r| r.attention == max).map(|r| r.region_id).collect()
}

pub fn region_correspondence(
    annotations: &[RegionAnnotation],
    predictions: &[SlidePrediction],
) -> Result<CorrespondenceReport, EvalError> {
    let by_slide: BTreeMap<&str, &SlidePrediction> = predictions.iter().map(|p| (p.slide_id.as_str(), p)).collect();
    let mut unknown = Vec::new();
    let mut truth = Vec::new();
    let mut by_attention = Vec::new();
    let mut by_prediction = Vec::new();
    for a in annotations {
        let Some(p) = by_slide.get(a.slide_id.as_str()) else {
            unknown.push((a.slide_id.clone(), a.region_id));
            continue;
        };
        let Some(region) = p.regions.iter().find(|r| r.region_id == a.region_id) else {
            unknown.push((a.slide_id.clone(), a.region_id));
            continue;
        };
        truth.push(a.grade);
        by_attention.push(if argmax_regions(p).contains(&a.region_id) {
            Grade::High
        } else {
            Grade::Low
        });
        by_prediction.push(call(region.prediction));
    }
    if !unknown.is_empty() {
        return Err(EvalError::UnknownRegions(unknown));
    }
    Ok(CorrespondenceReport {
        n_regions: truth.len(),
        attention: confusion_metrics(&by_attention, &truth)?,
        prediction: confusion_metrics(&by_prediction, &truth)?,
    })
}
