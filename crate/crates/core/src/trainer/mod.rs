//! Focal Tversky loss, per-step tile subsampling and the SGD loop with
//! validation-AUC early stopping.

mod loss;
mod subsample;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{focal_tversky_loss, tversky_index, LossConfig, FTL_GRAD_FLOOR};
pub use subsample::{region_quotas, subsample_bag};

use crate::embedstore::{Grade, NestedBag};
use crate::evalreport::{auc_rank, EvalError};
use crate::milmodels::{MilModel, ModelConfig, ModelError};
use ndarray::Array2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{predictions} prediction rows but {labels} label rows")]
    CountMismatch { predictions: usize, labels: usize },
    #[error("tile cap {cap} is below the region count {regions}")]
    CapBelowRegionCount { cap: usize, regions: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("{0} split holds a single class")]
    SingleClass(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Tiles drawn per bag per step.
    pub tiles_per_step: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_epochs: 200,
            patience: 30,
            tiles_per_step: 128,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig("lr must be finite and non-negative".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.tiles_per_step == 0 {
            return Err(TrainError::InvalidConfig(
                "max_epochs, patience and tiles_per_step must be positive".into(),
            ));
        }
        self.loss.validate()
    }
}

/// Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-bag loss of each epoch.
    pub train_loss: Vec<f64>,
    pub val_auc: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stopped_epoch: usize,
}

/// Passed to the progress callback after each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub best_epoch: usize,
}

fn check_split(bags: &[NestedBag], name: &'static str) -> Result<(), TrainError> {
    if bags.is_empty() {
        return Err(TrainError::EmptySplit(name));
    }
    let high = bags.iter().filter(|b| b.label.is_high()).count();
    if high == 0 || high == bags.len() {
        return Err(TrainError::SingleClass(name));
    }
    Ok(())
}

fn one_hot(label: Grade) -> Array2<f64> {
    let mut y = Array2::zeros((1, 2));
    y[[0, label.index()]] = 1.0;
    y
}

/// Seed of the shuffle and subsampling streams for one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Slide-level AUC of `model` over `bags`, using every instance.
pub fn validation_auc(model: &MilModel, bags: &[NestedBag]) -> Result<f64, TrainError> {
    let mut scores = Vec::with_capacity(bags.len());
    for b in bags {
        scores.push(model.forward(b)?.p_hg());
    }
    let labels: Vec<Grade> = bags.iter().map(|b| b.label).collect();
    Ok(auc_rank(&scores, &labels)?)
}

/// One SGD step on a single bag; returns the loss before the update.
pub fn sgd_step(model: &mut MilModel, bag: &NestedBag, lr: f64, loss: &LossConfig) -> Result<f64, TrainError> {
    let pass = model.forward(bag)?;
    let preds = pass.probabilities.clone().insert_axis(ndarray::Axis(0));
    let (value, grad) = focal_tversky_loss(preds.view(), one_hot(bag.label).view(), loss)?;
    if lr != 0.0 {
        let grads = model.backward(bag, &pass, grad.row(0))?;
        model.params.sgd_step(&grads, lr);
    }
    Ok(value)
}

pub fn train(
    model_config: &ModelConfig,
    train_bags: &[NestedBag],
    val_bags: &[NestedBag],
    config: &TrainConfig,
) -> Result<(MilModel, TrainHistory), TrainError> {
    train_with_progress(model_config, train_bags, val_bags, config, |_| {})
}

pub fn train_with_progress(
    model_config: &ModelConfig,
    train_bags: &[NestedBag],
    val_bags: &[NestedBag],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochReport),
) -> Result<(MilModel, TrainHistory), TrainError> {
    config.validate()?;
    check_split(train_bags, "train")?;
    check_split(val_bags, "val")?;
    if let Some(b) = train_bags.iter().find(|b| b.k() > config.tiles_per_step) {
        return Err(TrainError::CapBelowRegionCount {
            cap: config.tiles_per_step,
            regions: b.k(),
        });
    }

    let mut model = MilModel::new(*model_config)?;
    let mut best = model.clone();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_auc: Vec::new(),
        best_epoch: 0,
        best_val_auc: f64::NEG_INFINITY,
        stopped_epoch: 0,
    };
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    for epoch in 1..=config.max_epochs {
        let seed = epoch_seed(config.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut total = 0.0;
        for &i in &order {
            let bag = subsample_bag(&train_bags[i], config.tiles_per_step, seed)?;
            total += sgd_step(&mut model, &bag, config.lr, &config.loss)?;
        }
        let auc = validation_auc(&model, val_bags)?;
        history.train_loss.push(total / train_bags.len() as f64);
        history.val_auc.push(auc);
        history.stopped_epoch = epoch;
        if auc > history.best_val_auc {
            history.best_val_auc = auc;
            history.best_epoch = epoch;
            best = model.clone();
        }
        progress(&EpochReport {
            epoch,
            train_loss: total / train_bags.len() as f64,
            val_auc: auc,
            best_epoch: history.best_epoch,
        });
        if epoch - history.best_epoch >= config.patience {
            break;
        }
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::{synth_generate, ScaleMode, Split, SynthConfig};
    use crate::milmodels::Aggregator;
    use crate::regiongrid::RegionConfig;

    fn small() -> (Vec<NestedBag>, Vec<NestedBag>) {
        let cfg = SynthConfig {
            n_slides: [24, 12, 4],
            hg_fraction: [0.5, 0.5, 0.5],
            d_f: 8,
            mu_pos: 3.0,
            seed: 2,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let rc = RegionConfig::default();
        (
            ds.bags(Split::Train, ScaleMode::Mono, &rc).unwrap(),
            ds.bags(Split::Val, ScaleMode::Mono, &rc).unwrap(),
        )
    }

    fn model_config(agg: Aggregator) -> ModelConfig {
        let mut c = ModelConfig::new(agg, ScaleMode::Mono, 8);
        c.hidden = 8;
        c
    }

    #[test]
    fn zero_lr_keeps_initial_parameters() {
        let (tr, va) = small();
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 3,
            patience: 10,
            ..TrainConfig::default()
        };
        let mc = model_config(Aggregator::Nmia);
        let (model, history) = train(&mc, &tr, &va, &cfg).unwrap();
        assert_eq!(model, MilModel::new(mc).unwrap());
        assert_eq!(history.train_loss.len(), 3);
        assert_eq!(history.best_epoch, 1);
        assert!(history.val_auc.iter().all(|&a| a == history.val_auc[0]));
    }

    #[test]
    fn deterministic_and_stops_within_patience() {
        let (tr, va) = small();
        let cfg = TrainConfig {
            lr: 0.05,
            max_epochs: 40,
            patience: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let mc = model_config(Aggregator::Nmia);
        let (m1, h1) = train(&mc, &tr, &va, &cfg).unwrap();
        let (m2, h2) = train(&mc, &tr, &va, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        assert!(h1.stopped_epoch <= h1.best_epoch + cfg.patience);
        assert_eq!(h1.val_auc.len(), h1.stopped_epoch);
        assert_eq!(h1.best_val_auc, h1.val_auc[h1.best_epoch - 1]);
        assert!(h1.val_auc[..h1.best_epoch - 1].iter().all(|&a| a < h1.best_val_auc));
        assert_eq!(validation_auc(&m1, &va).unwrap(), h1.best_val_auc);
    }

    #[test]
    fn learns_separable_data() {
        let (tr, va) = small();
        let cfg = TrainConfig {
            lr: 0.05,
            max_epochs: 30,
            patience: 10,
            seed: 1,
            ..TrainConfig::default()
        };
        for agg in Aggregator::ALL {
            let (_, h) = train(&model_config(agg), &tr, &va, &cfg).unwrap();
            assert!(h.best_val_auc >= 0.9, "{agg}: {h:?}");
        }
    }

    #[test]
    fn single_class_split_rejected() {
        let (tr, va) = small();
        let only_hg: Vec<NestedBag> = va.iter().filter(|b| b.label.is_high()).cloned().collect();
        assert!(matches!(
            train(&model_config(Aggregator::Mean), &tr, &only_hg, &TrainConfig::default()),
            Err(TrainError::SingleClass("val"))
        ));
    }

    #[test]
    fn max_epochs_one_records_one_epoch() {
        let (tr, va) = small();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let (_, h) = train(&model_config(Aggregator::Abmil), &tr, &va, &cfg).unwrap();
        assert_eq!((h.train_loss.len(), h.stopped_epoch, h.best_epoch), (1, 1, 1));
    }
}
