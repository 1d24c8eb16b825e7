//! Lloyd's k-means on 2-D points with k-means++ seeding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) type Point = [f64; 2];

fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Index of the nearest center, ties resolved to the lowest index.
fn nearest(p: &Point, centers: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn plus_plus_init(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        centers.push(c);
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
    }
    centers
}

fn recompute_centers(points: &[Point], assign: &[usize], centers: &mut [Point]) -> Vec<usize> {
    let k = centers.len();
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        sums[c][0] += p[0];
        sums[c][1] += p[1];
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
        }
    }
    counts
}

/// Moves the point farthest from its own centroid into each empty cluster.
/// Returns true when any assignment changed.
fn repair_empty(points: &[Point], assign: &mut [usize], centers: &mut [Point]) -> bool {
    let mut repaired = false;
    loop {
        let counts = recompute_centers(points, assign, centers);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return repaired;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centers[assign[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        // k <= n guarantees some cluster holds at least two points.
        let i = far.expect("k-means called with more clusters than points");
        assign[i] = empty;
        centers[empty] = points[i];
        repaired = true;
    }
}

/// Clusters `points` into exactly `k` non-empty groups. Requires `1 <= k <= points.len()`.
pub(crate) fn kmeans(points: &[Point], k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k >= 1 && k <= points.len(), "invalid cluster count {k} for {} points", points.len());
    if k == 1 {
        return vec![0; points.len()];
    }
    let mut centers = plus_plus_init(points, k, rng);
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    repair_empty(points, &mut assign, &mut centers);
    for _ in 0..max_iters {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        let changed = next != assign;
        assign = next;
        let repaired = repair_empty(points, &mut assign, &mut centers);
        if !changed && !repaired {
            break;
        }
    }
    assign
}
