//! Evaluation: slide metrics, the uncertainty band, region correspondence,
//! grade/event association and heatmap export.

mod association;
mod band;
mod correspondence;
mod heatmap;
mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use association::{cramers_v, cramers_v_table, CramersV};
pub use band::{uncertainty_band, BandReport, UncertaintyBand};
pub use correspondence::{region_correspondence, CorrespondenceReport};
pub use heatmap::{export_heatmap, intensities, read_heatmap_doc, write_heatmap, Heatmap, HeatmapDoc, HeatmapRegion, HeatmapTile};
pub use metrics::{
    auc_rank, call, cohen_kappa, confusion_metrics, summarize, ConfusionMetrics, MetricSummary, MetricTable,
    StdEstimator, THRESHOLD,
};

use crate::embedstore::{read_jsonl, write_jsonl, EmbedError, Grade, NestedBag, RegionAnnotation, SlideEvent};
use crate::milmodels::{region_scores, MilModel, ModelError, RegionScore};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions")]
    Empty,
    #[error("{predicted} predictions but {labels} labels")]
    CountMismatch { predicted: usize, labels: usize },
    #[error("only one class present; AUC and the uncertainty band are undefined")]
    SingleClass,
    #[error("non-finite score")]
    NonFinite,
    #[error("annotations reference unknown (slide, region) pairs: {0:?}")]
    UnknownRegions(Vec<(String, usize)>),
    #[error("unknown slides: {0:?}")]
    UnknownSlides(Vec<String>),
    #[error("slide id {0:?} does not match {1:?}")]
    SlideMismatch(String, String),
    #[error("{0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        EvalError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub p_hg: f64,
    pub label: Grade,
    /// Empty for models without region attention.
    pub regions: Vec<RegionScore>,
}

pub fn predict(model: &MilModel, bag: &NestedBag) -> Result<SlidePrediction, EvalError> {
    let pass = model.forward(bag)?;
    Ok(SlidePrediction {
        slide_id: bag.slide_id.clone(),
        p_hg: pass.p_hg(),
        label: bag.label,
        regions: pass.trace().map(region_scores).unwrap_or_default(),
    })
}

pub fn predict_all(model: &MilModel, bags: &[NestedBag]) -> Result<Vec<SlidePrediction>, EvalError> {
    bags.iter().map(|b| predict(model, b)).collect()
}

pub fn write_predictions(path: &Path, predictions: &[SlidePrediction]) -> Result<(), EvalError> {
    Ok(write_jsonl(path, predictions)?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<SlidePrediction>, EvalError> {
    Ok(read_jsonl(path)?)
}

/// The full evaluation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_slides: usize,
    pub slide: MetricTable,
    pub band: UncertaintyBand,
    pub n_excluded: usize,
    pub retained: Option<ConfusionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub regions: Option<CorrespondenceReport>,
    /// Association of true grade with follow-up events.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cramers_v_label: Option<CramersV>,
    /// Association of predicted grade with follow-up events.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cramers_v_predicted: Option<CramersV>,
}

pub fn build_report(
    predictions: &[SlidePrediction],
    annotations: Option<&[RegionAnnotation]>,
    events: Option<&[SlideEvent]>,
) -> Result<MetricReport, EvalError> {
    let scores: Vec<f64> = predictions.iter().map(|p| p.p_hg).collect();
    let labels: Vec<Grade> = predictions.iter().map(|p| p.label).collect();
    let slide = MetricTable::compute(&scores, &labels)?;
    let band = uncertainty_band(&scores, &labels, StdEstimator::Sample)?;
    let regions = annotations.map(|a| region_correspondence(a, predictions)).transpose()?;
    let (cramers_v_label, cramers_v_predicted) = match events {
        Some(events) => {
            let by_slide: BTreeMap<&str, &SlidePrediction> =
                predictions.iter().map(|p| (p.slide_id.as_str(), p)).collect();
            let unknown: Vec<String> = events
                .iter()
                .filter(|e| !by_slide.contains_key(e.slide_id.as_str()))
                .map(|e| e.slide_id.clone())
                .collect();
            if !unknown.is_empty() {
                return Err(EvalError::UnknownSlides(unknown));
            }
            let truth: Vec<Grade> = events.iter().map(|e| by_slide[e.slide_id.as_str()].label).collect();
            let called: Vec<Grade> = events.iter().map(|e| call(by_slide[e.slide_id.as_str()].p_hg)).collect();
            let flags: Vec<bool> = events.iter().map(|e| e.event).collect();
            (Some(cramers_v(&truth, &flags)?), Some(cramers_v(&called, &flags)?))
        }
        None => (None, None),
    };
    Ok(MetricReport {
        n_slides: predictions.len(),
        slide,
        band: band.band,
        n_excluded: band.n_excluded,
        retained: band.retained_metrics,
        regions,
        cramers_v_label,
        cramers_v_predicted,
    })
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<(), EvalError> {
    let mut body = serde_json::to_vec_pretty(report).expect("report serializes");
    body.push(b'\n');
    fs::write(path, body).map_err(|e| EvalError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(id: &str, p_hg: f64, label: Grade) -> SlidePrediction {
        SlidePrediction {
            slide_id: id.into(),
            p_hg,
            label,
            regions: vec![RegionScore {
                region_id: 0,
                attention: 1.0,
                prediction: p_hg,
            }],
        }
    }

    #[test]
    fn report_sections_optional() {
        let preds = vec![p("a", 0.9, Grade::High), p("b", 0.2, Grade::Low), p("c", 0.6, Grade::High)];
        let r = build_report(&preds, None, None).unwrap();
        assert_eq!(r.slide.accuracy, 1.0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("regions"));
        assert!(!json.contains("cramers"));
        let anns = vec![RegionAnnotation {
            slide_id: "a".into(),
            region_id: 0,
            grade: Grade::High,
        }];
        let events = vec![
            SlideEvent {
                slide_id: "a".into(),
                event: true,
            },
            SlideEvent {
                slide_id: "b".into(),
                event: false,
            },
        ];
        let r = build_report(&preds, Some(&anns), Some(&events)).unwrap();
        assert_eq!(r.regions.unwrap().n_regions, 1);
        assert_eq!(r.cramers_v_label.unwrap().plain, 1.0);
    }

    #[test]
    fn unknown_event_slide_listed() {
        let preds = vec![p("a", 0.9, Grade::High), p("b", 0.2, Grade::Low)];
        let events = vec![SlideEvent {
            slide_id: "zz".into(),
            event: true,
        }];
        assert!(matches!(
            build_report(&preds, None, Some(&events)),
            Err(EvalError::UnknownSlides(v)) if v == vec!["zz".to_string()]
        ));
    }

    #[test]
    fn predictions_file_round_trip() {
        let preds = vec![p("a", 0.123456789012345, Grade::High), p("b", 1e-17, Grade::Low)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.jsonl");
        write_predictions(&path, &preds).unwrap();
        let back = read_predictions(&path).unwrap();
        for (x, y) in back.iter().zip(&preds) {
            assert_eq!(x.slide_id, y.slide_id);
            assert!((x.p_hg - y.p_hg).abs() < 1e-15);
        }
    }
}
