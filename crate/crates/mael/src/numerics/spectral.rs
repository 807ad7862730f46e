use super::{kmeans, matrix::SymMatrix, mix_seed, sym_eig, NumError};

const EIG_TOL: f64 = 1e-10;
const KMEANS_RESTARTS: usize = 10;

/// Spectral clustering on the symmetric normalized Laplacian
/// `L = I - D^{-1/2} A D^{-1/2}`: embed each node by the eigenvectors of the
/// k smallest eigenvalues, L2-normalize the rows, and run seeded k-means.
///
/// Nodes with zero degree are split off into their own singleton clusters
/// before the embedding; the remaining nodes share the remaining cluster
/// budget. The result is invariant to uniform positive scaling of `a`.
pub fn spectral_cluster(a: &SymMatrix, k: usize, seed: u64) -> Result<Vec<usize>, NumError> {
    let n = a.n();
    if k == 0 {
        return Err(NumError::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(NumError::InvalidArgument(format!("k = {k} exceeds the {n} nodes")));
    }
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if !v.is_finite() {
                return Err(NumError::NonFinite(i, j));
            }
            if v < 0.0 {
                return Err(NumError::InvalidArgument(format!(
                    "affinity ({i}, {j}) = {v} is negative"
                )));
            }
        }
    }

    let degrees: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let isolated: Vec<usize> = (0..n).filter(|&i| degrees[i] == 0.0).collect();
    if isolated.is_empty() {
        return embed_and_cluster(a, &degrees, k, seed);
    }

    let rest: Vec<usize> = (0..n).filter(|&i| degrees[i] > 0.0).collect();
    let mut labels = vec![0usize; n];
    for (c, &i) in isolated.iter().enumerate() {
        labels[i] = c;
    }
    if rest.is_empty() {
        return Ok(labels);
    }
    let k_rest = (k.saturating_sub(isolated.len())).max(1).min(rest.len());
    let sub = SymMatrix::from_fn(rest.len(), |i, j| a.get(rest[i], rest[j]));
    let sub_deg: Vec<f64> = (0..rest.len()).map(|i| sub.row(i).iter().sum()).collect();
    let sub_labels = embed_and_cluster(&sub, &sub_deg, k_rest, seed)?;
    for (local, &i) in rest.iter().enumerate() {
        labels[i] = isolated.len() + sub_labels[local];
    }
    Ok(labels)
}

fn embed_and_cluster(
    a: &SymMatrix,
    degrees: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, NumError> {
    let n = a.n();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let lap = SymMatrix::from_fn(n, |i, j| {
        let off = a.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
        if i == j {
            1.0 - off
        } else {
            -off
        }
    });
    let eig = sym_eig(&lap, EIG_TOL)?;
    // values are descending; the k smallest live at the tail.
    let cols: Vec<&Vec<f64>> = eig.vectors.iter().rev().take(k).collect();
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    for row in &mut rows {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    kmeans(&rows, k, KMEANS_RESTARTS, mix_seed(seed, 0x5EC7))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::adjusted_rand_index;
    use rand::Rng;

    fn block_affinity(sizes: &[usize], within: f64, between: f64, noise: f64, seed: u64) -> (SymMatrix, Vec<usize>) {
        let n: usize = sizes.iter().sum();
        let mut truth = Vec::with_capacity(n);
        for (b, &s) in sizes.iter().enumerate() {
            truth.extend(std::iter::repeat_n(b, s));
        }
        let mut rng = crate::numerics::rng_from(seed, 0xB10C);
        let mut jitter = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-noise..noise.max(f64::MIN_POSITIVE));
                jitter[i * n + j] = v;
                jitter[j * n + i] = v;
            }
        }
        let m = SymMatrix::from_fn(n, |i, j| {
            let base = if truth[i] == truth[j] { within } else { between };
            (base + jitter[i * n + j]).max(0.0)
        });
        (m, truth)
    }

    #[test]
    fn exact_three_blocks_recovered() {
        let (a, truth) = block_affinity(&[10, 10, 10], 1.0, 0.0, 0.0, 0);
        let labels = spectral_cluster(&a, 3, 11).unwrap();
        assert!((adjusted_rand_index(&labels, &truth) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_single_cluster() {
        let a = SymMatrix::from_fn(6, |_, _| 1.0);
        let labels = spectral_cluster(&a, 1, 3).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn isolated_nodes_get_singletons() {
        // Node 2 has no edges at all.
        let a = SymMatrix::from_fn(5, |i, j| {
            if i == 2 || j == 2 {
                0.0
            } else if i == j {
                0.0
            } else if (i < 2) == (j < 2) {
                1.0
            } else {
                0.0
            }
        });
        let labels = spectral_cluster(&a, 3, 5).unwrap();
        assert!(labels.iter().enumerate().all(|(i, &l)| i == 2 || l != labels[2]));
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[3], labels[4]);
        assert_ne!(labels[0], labels[3]);
    }

    #[test]
    fn invariant_to_uniform_scaling() {
        let (a, _) = block_affinity(&[8, 8], 1.0, 0.1, 0.05, 3);
        let base = spectral_cluster(&a, 2, 17).unwrap();
        for scale in [0.25, 4.0] {
            let scaled = SymMatrix::from_fn(a.n(), |i, j| a.get(i, j) * scale);
            assert_eq!(spectral_cluster(&scaled, 2, 17).unwrap(), base);
        }
    }

    #[test]
    fn noisy_blocks_high_ari_on_most_seeds() {
        let mut good = 0;
        for seed in 0..20 {
            let (a, truth) = block_affinity(&[10, 10, 10], 1.0, 0.05, 0.05, seed);
            let labels = spectral_cluster(&a, 3, seed).unwrap();
            if adjusted_rand_index(&labels, &truth) >= 0.95 {
                good += 1;
            }
        }
        assert!(good >= 18, "only {good}/20 seeds reached ARI 0.95");
    }

    #[test]
    fn rejects_negative_affinity() {
        let a = SymMatrix::from_fn(3, |i, j| if i == j { 0.0 } else { -1.0 });
        assert!(spectral_cluster(&a, 2, 0).is_err());
    }
}
