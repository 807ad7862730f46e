use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{dist_sq, mix_seed, NumError};

const MAX_LLOYD_ITERS: usize = 200;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignment: Vec<usize>,
    pub wcss: f64,
    /// Within-cluster sum of squares after each Lloyd assign/update step of
    /// the winning restart. Entries recorded after an empty-cluster reseed
    /// are flagged in `reseed_steps`.
    pub wcss_trace: Vec<f64>,
    pub reseed_steps: Vec<usize>,
}

/// Within-cluster sum of squares of an assignment against the implied
/// cluster means.
pub fn wcss(points: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            if c == 0 {
                s.clone()
            } else {
                s.iter().map(|v| v / c as f64).collect()
            }
        })
        .collect();
    points.iter().zip(assignment).map(|(p, &c)| dist_sq(p, &means[c])).sum()
}

/// Lloyd's algorithm with k-means++ seeding, `restarts` independent seeded
/// restarts, and empty-cluster repair. The best restart by WCSS wins; ties
/// keep the earlier restart.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>, NumError> {
    kmeans_detailed(points, k, restarts, seed).map(|r| r.assignment)
}

pub fn kmeans_detailed(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<KmeansResult, NumError> {
    let n = points.len();
    if k == 0 {
        return Err(NumError::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(NumError::InvalidArgument(format!("k = {k} exceeds the {n} points")));
    }
    if restarts == 0 {
        return Err(NumError::InvalidArgument("restarts must be at least 1".into()));
    }
    let d = points[0].len();
    for p in points {
        if p.len() != d {
            return Err(NumError::Dimension { expected: d, found: p.len() });
        }
        for &v in p {
            if !v.is_finite() {
                return Err(NumError::InvalidArgument("non-finite point coordinate".into()));
            }
        }
    }

    let mut best: Option<KmeansResult> = None;
    for r in 0..restarts {
        let mut rng = super::rng_from(mix_seed(seed, 0x6B6D), r as u64);
        let run = lloyd_run(points, k, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => run.wcss < b.wcss,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn lloyd_run(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KmeansResult {
    let n = points.len();
    let mut centroids = kmeanspp_init(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut reseed_steps = Vec::new();

    for step in 0..MAX_LLOYD_ITERS {
        let mut next = vec![0usize; n];
        for (i, p) in points.iter().enumerate() {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let dd = dist_sq(p, cen);
                if dd < best_d {
                    best_d = dd;
                    best_c = c;
                }
            }
            next[i] = best_c;
        }
        let stable = next == assignment;
        assignment = next;
        trace.push(wcss(points, &assignment, k));
        if stable {
            break;
        }

        let d = points[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|v| v / counts[c] as f64).collect();
            }
        }
        // Empty clusters are re-seeded from the point farthest from its own
        // centroid; each repair consumes a distinct point.
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                let mut far_i = None;
                let mut far_d = -1.0;
                for (i, p) in points.iter().enumerate() {
                    if taken.contains(&i) {
                        continue;
                    }
                    let dd = dist_sq(p, &centroids[assignment[i]]);
                    if dd > far_d {
                        far_d = dd;
                        far_i = Some(i);
                    }
                }
                if let Some(i) = far_i {
                    centroids[c] = points[i].clone();
                    taken.push(i);
                    reseed_steps.push(step);
                }
            }
        }
    }

    let wcss = *trace.last().expect("at least one iteration");
    KmeansResult { assignment, wcss, wcss_trace: trace, reseed_steps }
}

fn kmeanspp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.gen_range(0..n);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(p, &points[first])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All remaining points coincide with a chosen centroid; take the
            // lowest index not yet chosen for determinism.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(idx);
        for (i, p) in points.iter().enumerate() {
            let dd = dist_sq(p, &points[idx]);
            if dd < d2[i] {
                d2[i] = dd;
            }
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}
