//! Slide-level classification metrics.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::embedstore::Grade;

/// Decision threshold on p_HG.
pub const THRESHOLD: f64 = 0.5;

pub fn call(p_hg: f64) -> Grade {
    if p_hg >= THRESHOLD {
        Grade::High
    } else {
        Grade::Low
    }
}

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `[[TN, FP], [FN, TP]]` with HG as the positive class.
fn confusion(predicted: &[Grade], labels: &[Grade]) -> [[usize; 2]; 2] {
    let mut m = [[0; 2]; 2];
    for (&p, &y) in predicted.iter().zip(labels) {
        m[y.index()][p.index()] += 1;
    }
    m
}

fn check_pair(predicted: usize, labels: usize) -> Result<(), EvalError> {
    if predicted != labels {
        return Err(EvalError::CountMismatch { predicted, labels });
    }
    if labels == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_metrics(predicted: &[Grade], labels: &[Grade]) -> Result<ConfusionMetrics, EvalError> {
    check_pair(predicted.len(), labels.len())?;
    let m = confusion(predicted, labels);
    let n = predicted.len();
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..2 {
        let tp = m[c][c];
        let p = ratio(tp, m[0][c] + m[1][c]);
        let r = ratio(tp, m[c][0] + m[c][1]);
        precision += p / 2.0;
        recall += r / 2.0;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) / 2.0 } else { 0.0 };
    }
    Ok(ConfusionMetrics {
        accuracy: ratio(m[0][0] + m[1][1], n),
        precision,
        recall,
        f1,
    })
}

pub fn cohen_kappa(predicted: &[Grade], labels: &[Grade]) -> Result<f64, EvalError> {
    check_pair(predicted.len(), labels.len())?;
    let m = confusion(predicted, labels);
    let n = predicted.len() as u128;
    // (p_o - p_e) / (1 - p_e) scaled by n^2, kept in integers so exact cases stay exact
    let agree = (m[0][0] + m[1][1]) as u128;
    let chance: u128 = (0..2)
        .map(|c| ((m[c][0] + m[c][1]) as u128) * ((m[0][c] + m[1][c]) as u128))
        .sum();
    if chance == n * n {
        return Ok(0.0);
    }
    Ok(((n * agree) as f64 - chance as f64) / ((n * n - chance) as f64))
}

/// Mann-Whitney estimate of the ROC area: the fraction of (HG, LG) pairs
/// ranked correctly, ties counting one half.
pub fn auc_rank(scores: &[f64], labels: &[Grade]) -> Result<f64, EvalError> {
    check_pair(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NonFinite);
    }
    let n_pos = labels.iter().filter(|g| g.is_high()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, average ranks for ties (1-based)
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k].is_high() {
                rank2_sum += rank2;
            }
        }
        i = j + 1;
    }
    let u2 = rank2_sum - (n_pos as u128) * (n_pos as u128 + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// One column set of the slide-level results table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
    pub auc: f64,
}

impl MetricTable {
    pub fn compute(scores: &[f64], labels: &[Grade]) -> Result<Self, EvalError> {
        let predicted: Vec<Grade> = scores.iter().map(|&p| call(p)).collect();
        let c = confusion_metrics(&predicted, labels)?;
        Ok(Self {
            accuracy: c.accuracy,
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            kappa: cohen_kappa(&predicted, labels)?,
            auc: auc_rank(scores, labels)?,
        })
    }

    fn fields(&self) -> [f64; 6] {
        [self.accuracy, self.precision, self.recall, self.f1, self.kappa, self.auc]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        Self {
            accuracy: f[0],
            precision: f[1],
            recall: f[2],
            f1: f[3],
            kappa: f[4],
            auc: f[5],
        }
    }
}

/// Mean and sample standard deviation of each column across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub runs: usize,
    pub mean: MetricTable,
    pub std: MetricTable,
}

pub fn summarize(tables: &[MetricTable]) -> Result<MetricSummary, EvalError> {
    if tables.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for j in 0..6 {
        let xs: Vec<f64> = tables.iter().map(|t| t.fields()[j]).collect();
        mean[j] = mean_of(&xs);
        std[j] = std_of(&xs, StdEstimator::Sample);
    }
    Ok(MetricSummary {
        runs: tables.len(),
        mean: MetricTable::from_fields(mean),
        std: MetricTable::from_fields(std),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdEstimator {
    /// n - 1 denominator.
    #[default]
    Sample,
    /// n denominator.
    Population,
}

pub(crate) fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Zero for fewer than two values under the sample estimator.
pub(crate) fn std_of(xs: &[f64], estimator: StdEstimator) -> f64 {
    let n = xs.len();
    let den = match estimator {
        StdEstimator::Sample if n < 2 => return 0.0,
        StdEstimator::Sample => (n - 1) as f64,
        StdEstimator::Population if n == 0 => return 0.0,
        StdEstimator::Population => n as f64,
    };
    let m = mean_of(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Grade::{High as H, Low as L};

    /// TP=20, TN=20, FP=5, FN=5.
    fn worked() -> (Vec<Grade>, Vec<Grade>) {
        let mut p = Vec::new();
        let mut y = Vec::new();
        for (pred, truth, n) in [(H, H, 20), (L, L, 20), (H, L, 5), (L, H, 5)] {
            p.extend(std::iter::repeat_n(pred, n));
            y.extend(std::iter::repeat_n(truth, n));
        }
        (p, y)
    }

    pub(crate) fn brute_auc(scores: &[f64], labels: &[Grade]) -> f64 {
        let mut s = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i].is_high() && !labels[j].is_high() {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        s += 1.0;
                    } else if scores[i] == scores[j] {
                        s += 0.5;
                    }
                }
            }
        }
        s / pairs
    }

    #[test]
    fn confusion_worked_example() {
        let (p, y) = worked();
        let m = confusion_metrics(&p, &y).unwrap();
        assert_eq!(m.accuracy, 0.8);
        assert!((m.precision - 0.8).abs() < 1e-15);
        assert!((m.f1 - 0.8).abs() < 1e-15);
        assert_eq!(cohen_kappa(&p, &y).unwrap(), 0.6);
    }

    #[test]
    fn perfect_and_constant() {
        let y = vec![H, L, H, L];
        let m = confusion_metrics(&y, &y).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(cohen_kappa(&y, &y).unwrap(), 1.0);
        let all_hg = vec![H; 4];
        assert_eq!(confusion_metrics(&all_hg, &y).unwrap().accuracy, 0.5);
        assert_eq!(cohen_kappa(&all_hg, &y).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&all_hg, &all_hg).unwrap(), 0.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(confusion_metrics(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn auc_edges() {
        let y = vec![L, L, H, H];
        assert_eq!(auc_rank(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auc_rank(&[0.5; 4], &y).unwrap(), 0.5);
        assert!(matches!(auc_rank(&[0.1, 0.2], &[H, H]), Err(EvalError::SingleClass)));
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..200);
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 19.0).collect();
            let mut labels: Vec<Grade> = (0..n).map(|_| if rng.random_bool(0.4) { H } else { L }).collect();
            labels[0] = H;
            labels[1] = L;
            assert!((auc_rank(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_mean_and_sample_std() {
        let t = |a: f64| MetricTable {
            accuracy: a,
            precision: a,
            recall: a,
            f1: a,
            kappa: a,
            auc: a,
        };
        let s = summarize(&[t(0.8), t(0.9), t(1.0)]).unwrap();
        assert!((s.mean.auc - 0.9).abs() < 1e-15);
        assert!((s.std.auc - 0.1).abs() < 1e-15);
        assert_eq!(summarize(&[t(0.5)]).unwrap().std.f1, 0.0);
    }

    proptest! {
        #[test]
        fn kappa_symmetric_under_class_swap(pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..40)) {
            let flip = |g: usize| Grade::from_index(1 - g);
            let p: Vec<Grade> = pairs.iter().map(|&(a, _)| Grade::from_index(a)).collect();
            let y: Vec<Grade> = pairs.iter().map(|&(_, b)| Grade::from_index(b)).collect();
            let ps: Vec<Grade> = pairs.iter().map(|&(a, _)| flip(a)).collect();
            let ys: Vec<Grade> = pairs.iter().map(|&(_, b)| flip(b)).collect();
            let k = cohen_kappa(&p, &y).unwrap();
            prop_assert!((k - cohen_kappa(&ps, &ys).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&k));
        }

        #[test]
        fn metrics_in_unit_interval(pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..40)) {
            let p: Vec<Grade> = pairs.iter().map(|&(a, _)| Grade::from_index(a)).collect();
            let y: Vec<Grade> = pairs.iter().map(|&(_, b)| Grade::from_index(b)).collect();
            let m = confusion_metrics(&p, &y).unwrap();
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
