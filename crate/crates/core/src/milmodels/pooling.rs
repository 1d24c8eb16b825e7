//! Forward and backward passes of the four aggregators.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::diffcore::{
    classifier_backward, classifier_forward, gated_attention_backward, gated_attention_forward, AttentionCache,
    AttentionGrads, AttentionParams, ClassifierGrads, ClassifierParams, DiffError,
};
use crate::embedstore::NestedBag;

/// Column-wise mean of the instance matrix.
pub fn aggregate_mean(h: ArrayView2<f64>) -> Result<Array1<f64>, DiffError> {
    if h.nrows() == 0 {
        return Err(DiffError::EmptyBag);
    }
    Ok(h.mean_axis(Axis(0)).expect("non-empty"))
}

/// Column-wise maximum; ties go to the first row.
pub fn aggregate_max(h: ArrayView2<f64>) -> Result<Array1<f64>, DiffError> {
    Ok(aggregate_max_arg(h)?.0)
}

pub(crate) fn aggregate_max_arg(h: ArrayView2<f64>) -> Result<(Array1<f64>, Vec<usize>), DiffError> {
    if h.nrows() == 0 {
        return Err(DiffError::EmptyBag);
    }
    let mut best = h.row(0).to_owned();
    let mut arg = vec![0; h.ncols()];
    for (i, row) in h.outer_iter().enumerate().skip(1) {
        for (j, &v) in row.iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = i;
            }
        }
    }
    Ok((best, arg))
}

/// Flat attention pooling: `h = a . H`, probabilities from the classifier head.
#[derive(Debug, Clone)]
pub struct AbmilTrace {
    pub attention: AttentionCache,
    pub pooled: Array1<f64>,
    pub probabilities: Array1<f64>,
}

pub fn abmil_forward(
    h: ArrayView2<f64>,
    attention: &AttentionParams,
    classifier: &ClassifierParams,
) -> Result<AbmilTrace, DiffError> {
    let cache = gated_attention_forward(h, attention)?;
    let pooled = cache.weights.dot(&h);
    let probabilities = classifier_forward(pooled.view(), classifier)?;
    Ok(AbmilTrace {
        attention: cache,
        pooled,
        probabilities,
    })
}

pub(crate) fn abmil_backward(
    h: ArrayView2<f64>,
    attention: &AttentionParams,
    classifier: &ClassifierParams,
    trace: &AbmilTrace,
    d_probs: ArrayView1<f64>,
) -> Result<(AttentionGrads, ClassifierGrads), DiffError> {
    let clf = classifier_backward(trace.pooled.view(), classifier, trace.probabilities.view(), d_probs);
    let d_weights = h.dot(&clf.input);
    let att = gated_attention_backward(h, attention, &trace.attention, d_weights.view(), false)?;
    Ok((att, clf))
}

/// Everything computed by a nested forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub region_ids: Vec<usize>,
    /// Tile attention per region; each sums to one.
    pub tile_attention: Vec<Array1<f64>>,
    /// Region embeddings stacked, K x D.
    pub region_embeddings: Array2<f64>,
    /// Region attention, length K.
    pub region_attention: Array1<f64>,
    pub slide_embedding: Array1<f64>,
    /// `(p_LG, p_HG)` for the slide.
    pub probabilities: Array1<f64>,
    /// p_HG of the classifier head applied to each region embedding.
    pub region_scores: Vec<f64>,
    pub(crate) tile_caches: Vec<AttentionCache>,
    pub(crate) region_cache: AttentionCache,
}

impl ForwardTrace {
    pub fn p_hg(&self) -> f64 {
        self.probabilities[1]
    }
}

pub fn nmia_forward(
    bag: &NestedBag,
    tile_attention: &AttentionParams,
    region_attention: &AttentionParams,
    classifier: &ClassifierParams,
) -> Result<ForwardTrace, DiffError> {
    if bag.regions.is_empty() {
        return Err(DiffError::EmptyBag);
    }
    let d = tile_attention.input_dim();
    let k = bag.regions.len();
    let mut region_embeddings = Array2::zeros((k, d));
    let mut tile_caches = Vec::with_capacity(k);
    for (i, region) in bag.regions.iter().enumerate() {
        let cache = gated_attention_forward(region.instances.view(), tile_attention)?;
        region_embeddings.row_mut(i).assign(&cache.weights.dot(&region.instances));
        tile_caches.push(cache);
    }
    let region_cache = gated_attention_forward(region_embeddings.view(), region_attention)?;
    let slide_embedding = region_cache.weights.dot(&region_embeddings);
    let probabilities = classifier_forward(slide_embedding.view(), classifier)?;
    let region_scores = region_embeddings
        .outer_iter()
        .map(|r| classifier_forward(r, classifier).map(|p| p[1]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ForwardTrace {
        region_ids: bag.regions.iter().map(|r| r.region_id).collect(),
        tile_attention: tile_caches.iter().map(|c| c.weights.clone()).collect(),
        region_embeddings,
        region_attention: region_cache.weights.clone(),
        slide_embedding,
        probabilities,
        region_scores,
        tile_caches,
        region_cache,
    })
}

pub(crate) struct NmiaGrads {
    pub tile_attention: AttentionGrads,
    pub region_attention: AttentionGrads,
    pub classifier: ClassifierGrads,
}

pub(crate) fn nmia_backward(
    bag: &NestedBag,
    tile_attention: &AttentionParams,
    region_attention: &AttentionParams,
    classifier: &ClassifierParams,
    trace: &ForwardTrace,
    d_probs: ArrayView1<f64>,
) -> Result<NmiaGrads, DiffError> {
    let clf = classifier_backward(trace.slide_embedding.view(), classifier, trace.probabilities.view(), d_probs);
    let d_slide = &clf.input;
    // h_wsi = sum_k a_k h_reg_k
    let d_region_weights = trace.region_embeddings.dot(d_slide);
    let reg = gated_attention_backward(
        trace.region_embeddings.view(),
        region_attention,
        &trace.region_cache,
        d_region_weights.view(),
        true,
    )?;
    let mut d_region_emb = reg.h.clone().expect("input gradient requested");
    for (k, mut row) in d_region_emb.outer_iter_mut().enumerate() {
        row.scaled_add(trace.region_attention[k], d_slide);
    }

    let m = tile_attention.hidden();
    let d = tile_attention.input_dim();
    let mut tile = AttentionGrads {
        w: Array1::zeros(m),
        v: Array2::zeros((m, d)),
        u: Array2::zeros((m, d)),
        h: None,
    };
    for (k, region) in bag.regions.iter().enumerate() {
        let d_weights = region.instances.dot(&d_region_emb.row(k));
        let g = gated_attention_backward(
            region.instances.view(),
            tile_attention,
            &trace.tile_caches[k],
            d_weights.view(),
            false,
        )?;
        tile.w += &g.w;
        tile.v += &g.v;
        tile.u += &g.u;
    }
    Ok(NmiaGrads {
        tile_attention: tile,
        region_attention: AttentionGrads { h: None, ..reg },
        classifier: clf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singleton_pooling() {
        let h = array![[1.5, -2.0, 0.25]];
        assert_eq!(aggregate_mean(h.view()).unwrap(), h.row(0));
        assert_eq!(aggregate_max(h.view()).unwrap(), h.row(0));
    }

    #[test]
    fn hand_arithmetic() {
        let h = array![[0.0, 2.0], [2.0, 0.0]];
        assert_eq!(aggregate_mean(h.view()).unwrap().to_vec(), vec![1.0, 1.0]);
        assert_eq!(aggregate_max(h.view()).unwrap().to_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn empty_bag_errors() {
        let h = Array2::<f64>::zeros((0, 3));
        assert_eq!(aggregate_mean(h.view()).unwrap_err(), DiffError::EmptyBag);
        assert_eq!(aggregate_max(h.view()).unwrap_err(), DiffError::EmptyBag);
    }

    #[test]
    fn looped_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (n, d) = (rng.random_range(1..20), rng.random_range(1..9));
            let h = Array::from_shape_simple_fn((n, d), || rng.random_range(-5.0..5.0));
            let mean = aggregate_mean(h.view()).unwrap();
            let max = aggregate_max(h.view()).unwrap();
            for j in 0..d {
                let mut s = 0.0;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..n {
                    s += h[[i, j]];
                    mx = mx.max(h[[i, j]]);
                }
                assert!((mean[j] - s / n as f64).abs() < 1e-12);
                assert_eq!(max[j], mx);
            }
        }
    }

    #[test]
    fn max_ties_take_first_row() {
        let h = array![[1.0, 3.0], [1.0, 3.0], [0.0, 3.0]];
        let (_, arg) = aggregate_max_arg(h.view()).unwrap();
        assert_eq!(arg, vec![0, 0]);
    }
}
