//! Slide-level aggregation models: MEAN, MAX, flat attention (AbMIL) and the
//! nested attention model (NMIA) with tile-level and region-level attention.

mod pooling;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pooling::{abmil_forward, aggregate_max, aggregate_mean, nmia_forward, AbmilTrace, ForwardTrace};

use crate::diffcore::{
    read_checkpoint, write_checkpoint, AttentionGrads, AttentionParams, CheckpointError, ClassifierGrads, ClassifierParams,
    DiffError, ParamStore,
};
use crate::embedstore::{NestedBag, ScaleMode};
use pooling::{abmil_backward, aggregate_max_arg, nmia_backward};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("bag dimension {found} does not match model dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("bad checkpoint sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Max,
    Abmil,
    Nmia,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [Aggregator::Mean, Aggregator::Max, Aggregator::Abmil, Aggregator::Nmia];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::Abmil => "abmil",
            Aggregator::Nmia => "nmia",
        }
    }

    pub fn has_tile_attention(self) -> bool {
        matches!(self, Aggregator::Abmil | Aggregator::Nmia)
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown aggregator {s:?} (mean|max|abmil|nmia)"))
    }
}

/// Model hyper-parameters; serialized as the checkpoint sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub aggregator: Aggregator,
    pub scale_mode: ScaleMode,
    /// Fused instance dimension, `|scales| * D_f`.
    #[serde(rename = "D")]
    pub dim: usize,
    /// Attention hidden width.
    #[serde(rename = "M")]
    pub hidden: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(aggregator: Aggregator, scale_mode: ScaleMode, d_f: usize) -> Self {
        Self {
            aggregator,
            scale_mode,
            dim: scale_mode.fused_dim(d_f),
            hidden: 64,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let scales = self.scale_mode.scales().len();
        if self.dim == 0 || self.dim % scales != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "D = {} is not a positive multiple of {scales} scales",
                self.dim
            )));
        }
        if self.hidden == 0 {
            return Err(ModelError::InvalidConfig("attention width M must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tile_attention: Option<AttentionParams>,
    pub region_attention: Option<AttentionParams>,
    pub classifier: ClassifierParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tile_attention: Option<AttentionGrads>,
    pub region_attention: Option<AttentionGrads>,
    pub classifier: ClassifierGrads,
}

const TILE: &str = "tile_attention";
const REGION: &str = "region_attention";

fn put_attention(store: &mut ParamStore, prefix: &str, w: &Array1<f64>, v: &ndarray::Array2<f64>, u: &ndarray::Array2<f64>) {
    store.insert_1(format!("{prefix}.w"), w);
    store.insert_2(format!("{prefix}.V"), v);
    store.insert_2(format!("{prefix}.U"), u);
}

fn get_attention(store: &ParamStore, prefix: &str) -> Result<AttentionParams, CheckpointError> {
    let p = AttentionParams {
        w: store.try_get_1(&format!("{prefix}.w"))?,
        v: store.try_get_2(&format!("{prefix}.V"))?,
        u: store.try_get_2(&format!("{prefix}.U"))?,
    };
    p.validate().map_err(|_| CheckpointError::BlockShape {
        name: prefix.into(),
        expected: p.v.shape().to_vec(),
        found: p.u.shape().to_vec(),
    })?;
    Ok(p)
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let tile_attention = config
            .aggregator
            .has_tile_attention()
            .then(|| AttentionParams::init(config.dim, config.hidden, &mut rng));
        let region_attention =
            (config.aggregator == Aggregator::Nmia).then(|| AttentionParams::init(config.dim, config.hidden, &mut rng));
        let classifier = ClassifierParams::init(config.dim, &mut rng);
        Self {
            tile_attention,
            region_attention,
            classifier,
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        if let Some(a) = &self.tile_attention {
            put_attention(&mut s, TILE, &a.w, &a.v, &a.u);
        }
        if let Some(a) = &self.region_attention {
            put_attention(&mut s, REGION, &a.w, &a.v, &a.u);
        }
        s.insert_2("classifier.weight", &self.classifier.weight);
        s.insert_1("classifier.bias", &self.classifier.bias);
        s
    }

    pub fn from_store(store: &ParamStore, aggregator: Aggregator) -> Result<Self, CheckpointError> {
        let tile_attention = aggregator.has_tile_attention().then(|| get_attention(store, TILE)).transpose()?;
        let region_attention = (aggregator == Aggregator::Nmia)
            .then(|| get_attention(store, REGION))
            .transpose()?;
        let classifier = ClassifierParams {
            weight: store.try_get_2("classifier.weight")?,
            bias: store.try_get_1("classifier.bias")?,
        };
        Ok(Self {
            tile_attention,
            region_attention,
            classifier,
        })
    }

    /// Plain SGD step: `theta -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &ModelGrads, lr: f64) {
        fn step(p: &mut AttentionParams, g: &AttentionGrads, lr: f64) {
            p.w.scaled_add(-lr, &g.w);
            p.v.scaled_add(-lr, &g.v);
            p.u.scaled_add(-lr, &g.u);
        }
        if let (Some(p), Some(g)) = (&mut self.tile_attention, &grads.tile_attention) {
            step(p, g, lr);
        }
        if let (Some(p), Some(g)) = (&mut self.region_attention, &grads.region_attention) {
            step(p, g, lr);
        }
        self.classifier.weight.scaled_add(-lr, &grads.classifier.weight);
        self.classifier.bias.scaled_add(-lr, &grads.classifier.bias);
    }
}

impl ModelGrads {
    /// Same block names as [`ModelParams::to_store`].
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        if let Some(a) = &self.tile_attention {
            put_attention(&mut s, TILE, &a.w, &a.v, &a.u);
        }
        if let Some(a) = &self.region_attention {
            put_attention(&mut s, REGION, &a.w, &a.v, &a.u);
        }
        s.insert_2("classifier.weight", &self.classifier.weight);
        s.insert_1("classifier.bias", &self.classifier.bias);
        s
    }
}

#[derive(Debug, Clone)]
enum PassDetail {
    Pooled { pooled: Array1<f64> },
    Abmil { h: ndarray::Array2<f64>, trace: AbmilTrace },
    Nmia(ForwardTrace),
}

/// Result of one forward pass over a slide.
#[derive(Debug, Clone)]
pub struct SlidePass {
    pub probabilities: Array1<f64>,
    detail: PassDetail,
}

impl SlidePass {
    pub fn p_hg(&self) -> f64 {
        self.probabilities[1]
    }

    /// Nested trace, for NMIA models.
    pub fn trace(&self) -> Option<&ForwardTrace> {
        match &self.detail {
            PassDetail::Nmia(t) => Some(t),
            _ => None,
        }
    }

    /// Attention over the flattened bag, for AbMIL models.
    pub fn flat_attention(&self) -> Option<&Array1<f64>> {
        match &self.detail {
            PassDetail::Abmil { trace, .. } => Some(&trace.attention.weights),
            _ => None,
        }
    }

    pub fn pooled(&self) -> &Array1<f64> {
        match &self.detail {
            PassDetail::Pooled { pooled } => pooled,
            PassDetail::Abmil { trace, .. } => &trace.pooled,
            PassDetail::Nmia(t) => &t.slide_embedding,
        }
    }
}

/// One `(region_id, attention, prediction)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region_id: usize,
    pub attention: f64,
    pub prediction: f64,
}

/// Region attention and per-region HG probability from a nested trace.
pub fn region_scores(trace: &ForwardTrace) -> Vec<RegionScore> {
    trace
        .region_ids
        .iter()
        .zip(trace.region_attention.iter())
        .zip(&trace.region_scores)
        .map(|((&region_id, &attention), &prediction)| RegionScore {
            region_id,
            attention,
            prediction,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl MilModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            config,
            params: ModelParams::init(&config),
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        let dim_ok = params.classifier.input_dim() == config.dim
            && params.tile_attention.as_ref().is_none_or(|a| a.input_dim() == config.dim)
            && params.region_attention.as_ref().is_none_or(|a| a.input_dim() == config.dim);
        if !dim_ok {
            return Err(ModelError::DimMismatch {
                expected: config.dim,
                found: params.classifier.input_dim(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn from_store(config: ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let params = ModelParams::from_store(store, config.aggregator)?;
        Self::from_parts(config, params)
    }

    fn tile_att(&self) -> &AttentionParams {
        self.params.tile_attention.as_ref().expect("attention model carries tile attention")
    }

    pub fn forward(&self, bag: &NestedBag) -> Result<SlidePass, ModelError> {
        if bag.regions.is_empty() || bag.regions.iter().any(|r| r.instances.nrows() == 0) {
            return Err(DiffError::EmptyBag.into());
        }
        if bag.dim() != self.config.dim {
            return Err(ModelError::DimMismatch {
                expected: self.config.dim,
                found: bag.dim(),
            });
        }
        let clf = &self.params.classifier;
        let (probabilities, detail) = match self.config.aggregator {
            Aggregator::Mean => {
                let h = bag.flatten();
                let pooled = aggregate_mean(h.view())?;
                let p = crate::diffcore::classifier_forward(pooled.view(), clf)?;
                (p, PassDetail::Pooled { pooled })
            }
            Aggregator::Max => {
                let h = bag.flatten();
                let (pooled, _) = aggregate_max_arg(h.view())?;
                let p = crate::diffcore::classifier_forward(pooled.view(), clf)?;
                (p, PassDetail::Pooled { pooled })
            }
            Aggregator::Abmil => {
                let h = bag.flatten();
                let trace = abmil_forward(h.view(), self.tile_att(), clf)?;
                (trace.probabilities.clone(), PassDetail::Abmil { h, trace })
            }
            Aggregator::Nmia => {
                let region = self.params.region_attention.as_ref().expect("nmia carries region attention");
                let trace = nmia_forward(bag, self.tile_att(), region, clf)?;
                (trace.probabilities.clone(), PassDetail::Nmia(trace))
            }
        };
        Ok(SlidePass { probabilities, detail })
    }

    /// Parameter gradients given dL/dp for the slide probabilities.
    pub fn backward(&self, bag: &NestedBag, pass: &SlidePass, d_probs: ArrayView1<f64>) -> Result<ModelGrads, ModelError> {
        let clf = &self.params.classifier;
        let grads = match &pass.detail {
            PassDetail::Pooled { pooled } => ModelGrads {
                tile_attention: None,
                region_attention: None,
                classifier: crate::diffcore::classifier_backward(pooled.view(), clf, pass.probabilities.view(), d_probs),
            },
            PassDetail::Abmil { h, trace } => {
                let (att, classifier) = abmil_backward(h.view(), self.tile_att(), clf, trace, d_probs)?;
                ModelGrads {
                    tile_attention: Some(att),
                    region_attention: None,
                    classifier,
                }
            }
            PassDetail::Nmia(trace) => {
                let region = self.params.region_attention.as_ref().expect("nmia carries region attention");
                let g = nmia_backward(bag, self.tile_att(), region, clf, trace, d_probs)?;
                ModelGrads {
                    tile_attention: Some(g.tile_attention),
                    region_attention: Some(g.region_attention),
                    classifier: g.classifier,
                }
            }
        };
        Ok(grads)
    }
}

/// `<checkpoint>.json` next to the parameter file.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Writes the parameter container and its JSON sidecar.
pub fn save_model(model: &MilModel, checkpoint: &Path) -> Result<(), ModelError> {
    write_checkpoint(&model.params.to_store(), checkpoint)?;
    let side = sidecar_path(checkpoint);
    let mut body = serde_json::to_vec_pretty(&model.config).expect("config serializes");
    body.push(b'\n');
    fs::write(&side, body).map_err(|e| ModelError::Sidecar {
        path: side.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_model(checkpoint: &Path) -> Result<MilModel, ModelError> {
    let side = sidecar_path(checkpoint);
    let sidecar_err = |message: String| ModelError::Sidecar {
        path: side.display().to_string(),
        message,
    };
    let bytes = fs::read(&side).map_err(|e| sidecar_err(e.to_string()))?;
    let config: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| sidecar_err(e.to_string()))?;
    MilModel::from_store(config, &read_checkpoint(checkpoint)?)
}
