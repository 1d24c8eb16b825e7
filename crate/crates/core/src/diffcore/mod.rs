//! Hand-differentiated building blocks: gated attention pooling scores, the
//! two-class classifier head, a parameter container and a finite-difference
//! gradient checker.
//!
//! All arithmetic is f64. Forward functions return caches that the matching
//! backward functions consume.

mod attention;
mod classifier;
mod gradcheck;
mod params;

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use attention::{gated_attention, gated_attention_backward, gated_attention_forward, AttentionCache, AttentionGrads, AttentionParams};
pub use classifier::{classifier_backward, classifier_forward, softmax, ClassifierGrads, ClassifierParams};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use params::{read_checkpoint, write_checkpoint, CheckpointError, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub type Tensor2 = ndarray::Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("empty bag")]
    EmptyBag,
}

pub(crate) fn check_finite_2(what: &'static str, x: ArrayView2<f64>) -> Result<(), DiffError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite(what))
    }
}

pub(crate) fn check_finite_1(what: &'static str, x: ArrayView1<f64>) -> Result<(), DiffError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite(what))
    }
}

/// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) initializer.
pub(crate) fn init_uniform(shape: (usize, usize), fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
