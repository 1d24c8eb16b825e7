use ndarray::Axis;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::embedstore::{slide_seed, BagRegion, NestedBag};

/// Per-region tile quotas summing to `cap`: proportional to region size,
/// largest remainders first, never below one and never above the region size.
pub fn region_quotas(sizes: &[usize], cap: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total <= cap {
        return sizes.to_vec();
    }
    let ideal: Vec<f64> = sizes.iter().map(|&n| cap as f64 * n as f64 / total as f64).collect();
    let mut quota: Vec<usize> = ideal
        .iter()
        .zip(sizes)
        .map(|(&q, &n)| (q.floor() as usize).clamp(1, n))
        .collect();
    let mut by_remainder: Vec<usize> = (0..sizes.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = quota.iter().sum();
    while assigned < cap {
        let mut progressed = false;
        for &k in &by_remainder {
            if assigned == cap {
                break;
            }
            if quota[k] < sizes[k] {
                quota[k] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    while assigned > cap {
        // the one-tile floor overshot; take back from the smallest remainders
        let mut progressed = false;
        for &k in by_remainder.iter().rev() {
            if assigned == cap {
                break;
            }
            if quota[k] > 1 {
                quota[k] -= 1;
                assigned -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}

/// Caps the bag at `cap` instances by region-stratified uniform sampling
/// without replacement. Deterministic in `(bag.slide_id, step_seed)`.
pub fn subsample_bag(bag: &NestedBag, cap: usize, step_seed: u64) -> Result<NestedBag, TrainError> {
    if cap < bag.k() {
        return Err(TrainError::CapBelowRegionCount { cap, regions: bag.k() });
    }
    if bag.n_instances() <= cap {
        return Ok(bag.clone());
    }
    let quotas = region_quotas(&bag.instance_counts(), cap);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    rng.set_stream(slide_seed(&bag.slide_id));
    let regions = bag
        .regions
        .iter()
        .zip(quotas)
        .map(|(r, q)| {
            let n = r.instances.nrows();
            if q >= n {
                return r.clone();
            }
            let mut rows = index::sample(&mut rng, n, q).into_vec();
            rows.sort_unstable();
            BagRegion {
                region_id: r.region_id,
                tile_ids: rows.iter().map(|&i| r.tile_ids[i]).collect(),
                instances: r.instances.select(Axis(0), &rows),
            }
        })
        .collect();
    Ok(NestedBag {
        slide_id: bag.slide_id.clone(),
        label: bag.label,
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::Grade;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn bag(counts: &[usize]) -> NestedBag {
        let mut next = 0u64;
        NestedBag {
            slide_id: "slide".into(),
            label: Grade::Low,
            regions: counts
                .iter()
                .enumerate()
                .map(|(k, &n)| {
                    let ids: Vec<u64> = (next..next + n as u64).collect();
                    next += n as u64;
                    BagRegion {
                        region_id: k,
                        instances: Array2::from_shape_fn((n, 2), |(i, j)| (ids[i] * 2 + j as u64) as f64),
                        tile_ids: ids,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn under_cap_unchanged() {
        let b = bag(&[60, 40]);
        assert_eq!(subsample_bag(&b, 128, 1).unwrap(), b);
    }

    #[test]
    fn proportional_split() {
        assert_eq!(subsample_bag(&bag(&[200, 200]), 128, 1).unwrap().instance_counts(), vec![64, 64]);
        let b = bag(&[300, 100]);
        let a = subsample_bag(&b, 128, 5).unwrap();
        assert_eq!(a.instance_counts(), vec![96, 32]);
        for _ in 0..3 {
            assert_eq!(subsample_bag(&b, 128, 5).unwrap(), a);
        }
        assert_ne!(subsample_bag(&b, 128, 6).unwrap(), a);
    }

    #[test]
    fn rows_follow_tile_ids() {
        let b = bag(&[300, 100]);
        let a = subsample_bag(&b, 128, 2).unwrap();
        for r in &a.regions {
            assert!(r.tile_ids.windows(2).all(|w| w[0] < w[1]));
            for (row, &t) in r.instances.outer_iter().zip(&r.tile_ids) {
                assert_eq!(row[0], (t * 2) as f64);
            }
        }
    }

    #[test]
    fn cap_below_region_count_rejected() {
        assert!(matches!(
            subsample_bag(&bag(&[5, 5, 5]), 2, 0),
            Err(TrainError::CapBelowRegionCount { cap: 2, regions: 3 })
        ));
    }

    #[test]
    fn tiny_regions_keep_one_tile() {
        let q = region_quotas(&[1000, 1, 1, 1], 10);
        assert_eq!(q.iter().sum::<usize>(), 10);
        assert!(q.iter().all(|&n| n >= 1));
    }

    proptest! {
        #[test]
        fn quotas_sum_to_cap(sizes in proptest::collection::vec(1usize..300, 1..10), extra in 0usize..400) {
            let cap = sizes.len() + extra;
            let q = region_quotas(&sizes, cap);
            let total: usize = sizes.iter().sum();
            prop_assert_eq!(q.iter().sum::<usize>(), total.min(cap));
            for (a, n) in q.iter().zip(&sizes) {
                prop_assert!(*a >= 1 && a <= n);
            }
        }
    }
}
