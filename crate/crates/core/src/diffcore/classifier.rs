use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;

use super::{check_finite_1, init_uniform, DiffError};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = z.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

/// Affine map to two logits followed by softmax; index 0 is LG, 1 is HG.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// 2 x D.
    pub weight: Array2<f64>,
    /// Length 2.
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array1<f64>,
}

impl ClassifierParams {
    pub fn init(input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = init_uniform((2, input_dim), input_dim, rng);
        let bias = init_uniform((1, 2), input_dim, rng).row(0).to_owned();
        Self { weight, bias }
    }

    pub fn zeros(input_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((2, input_dim)),
            bias: Array1::zeros(2),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Class probabilities `(p_LG, p_HG)` for one embedding.
pub fn classifier_forward(h: ArrayView1<f64>, params: &ClassifierParams) -> Result<Array1<f64>, DiffError> {
    if params.weight.nrows() != 2 || params.bias.len() != 2 || h.len() != params.input_dim() {
        return Err(DiffError::ShapeMismatch {
            what: "classifier input",
            expected: vec![2, params.input_dim()],
            found: vec![params.weight.nrows(), h.len()],
        });
    }
    check_finite_1("classifier input", h)?;
    let logits = params.weight.dot(&h) + &params.bias;
    Ok(softmax(logits.view()))
}

/// Backpropagates dL/dp through the softmax and affine map.
pub fn classifier_backward(
    h: ArrayView1<f64>,
    params: &ClassifierParams,
    probs: ArrayView1<f64>,
    upstream: ArrayView1<f64>,
) -> ClassifierGrads {
    let dot = probs.dot(&upstream);
    let d_logits = &probs * &(&upstream - dot);
    let weight = d_logits.view().insert_axis(Axis(1)).dot(&h.insert_axis(Axis(0)));
    let input = params.weight.t().dot(&d_logits);
    ClassifierGrads {
        weight,
        bias: d_logits,
        input,
    }
}
