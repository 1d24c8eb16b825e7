use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_chacha::ChaCha8Rng;

use super::{check_finite_2, init_uniform, sigmoid, softmax, DiffError};

/// Gated attention parameters: score(h) = w . (tanh(V h) * sigm(U h)).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Length M.
    pub w: Array1<f64>,
    /// M x D.
    pub v: Array2<f64>,
    /// M x D.
    pub u: Array2<f64>,
}

impl AttentionParams {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let v = init_uniform((hidden, input_dim), input_dim, rng);
        let u = init_uniform((hidden, input_dim), input_dim, rng);
        let w = init_uniform((1, hidden), hidden, rng).row(0).to_owned();
        Self { w, v, u }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w: Array1::zeros(hidden),
            v: Array2::zeros((hidden, input_dim)),
            u: Array2::zeros((hidden, input_dim)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.len()
    }

    pub fn input_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        let (m, d) = self.v.dim();
        if self.w.len() != m || self.u.dim() != (m, d) {
            return Err(DiffError::ShapeMismatch {
                what: "attention parameters",
                expected: vec![m, d],
                found: vec![self.w.len(), self.u.nrows(), self.u.ncols()],
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub w: Array1<f64>,
    pub v: Array2<f64>,
    pub u: Array2<f64>,
    /// Gradient with respect to the instance matrix, when requested.
    pub h: Option<Array2<f64>>,
}

/// Intermediates kept from the forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// tanh(V h_i), N x M.
    pub tanh_v: Array2<f64>,
    /// sigm(U h_i), N x M.
    pub sig_u: Array2<f64>,
    /// Pre-softmax scores, length N.
    pub scores: Array1<f64>,
    /// Attention weights, length N.
    pub weights: Array1<f64>,
}

fn check_input(h: ArrayView2<f64>, params: &AttentionParams) -> Result<(), DiffError> {
    if h.nrows() == 0 {
        return Err(DiffError::EmptyBag);
    }
    if h.ncols() != params.input_dim() {
        return Err(DiffError::ShapeMismatch {
            what: "attention input",
            expected: vec![h.nrows(), params.input_dim()],
            found: vec![h.nrows(), h.ncols()],
        });
    }
    check_finite_2("attention input", h)
}

/// Attention weights over the rows of `h` together with the forward cache.
pub fn gated_attention_forward(h: ArrayView2<f64>, params: &AttentionParams) -> Result<AttentionCache, DiffError> {
    params.validate()?;
    check_input(h, params)?;
    let tanh_v = h.dot(&params.v.t()).mapv_into(f64::tanh);
    let sig_u = h.dot(&params.u.t()).mapv_into(sigmoid);
    let scores = (&tanh_v * &sig_u).dot(&params.w);
    let weights = softmax(scores.view());
    Ok(AttentionCache {
        tanh_v,
        sig_u,
        scores,
        weights,
    })
}

/// Attention weights only.
pub fn gated_attention(h: ArrayView2<f64>, params: &AttentionParams) -> Result<Array1<f64>, DiffError> {
    Ok(gated_attention_forward(h, params)?.weights)
}

/// Backpropagates `upstream` (dL/da, length N) through the attention scorer.
pub fn gated_attention_backward(
    h: ArrayView2<f64>,
    params: &AttentionParams,
    cache: &AttentionCache,
    upstream: ArrayView1<f64>,
    want_input_grad: bool,
) -> Result<AttentionGrads, DiffError> {
    let n = h.nrows();
    if upstream.len() != n || cache.weights.len() != n {
        return Err(DiffError::ShapeMismatch {
            what: "attention upstream gradient",
            expected: vec![n],
            found: vec![upstream.len()],
        });
    }
    // softmax: ds_i = a_i (g_i - sum_j a_j g_j)
    let a = &cache.weights;
    let mean_g = a.dot(&upstream);
    let d_scores: Array1<f64> = Zip::from(a).and(&upstream).map_collect(|&ai, &gi| ai * (gi - mean_g));

    let ds_col = d_scores.view().insert_axis(Axis(1));
    let gated = &cache.tanh_v * &cache.sig_u;
    let d_w = gated.t().dot(&d_scores);

    // d(pre-tanh) = ds * w * sig * (1 - t^2); d(pre-sigm) = ds * w * t * sig * (1 - sig)
    let mut d_zv = Array2::zeros(cache.tanh_v.raw_dim());
    let mut d_zu = Array2::zeros(cache.sig_u.raw_dim());
    let w_row = params.w.view().insert_axis(Axis(0));
    Zip::from(&mut d_zv)
        .and(&mut d_zu)
        .and(&cache.tanh_v)
        .and(&cache.sig_u)
        .and_broadcast(&ds_col)
        .and_broadcast(&w_row)
        .for_each(|zv, zu, &t, &s, &ds, &w| {
            let g = ds * w;
            *zv = g * s * (1.0 - t * t);
            *zu = g * t * s * (1.0 - s);
        });

    let d_v = d_zv.t().dot(&h);
    let d_u = d_zu.t().dot(&h);
    let d_h = want_input_grad.then(|| d_zv.dot(&params.v) + d_zu.dot(&params.u));
    Ok(AttentionGrads {
        w: d_w,
        v: d_v,
        u: d_u,
        h: d_h,
    })
}
