use super::{matrix::SymMatrix, NumError};

/// Eigendecomposition of a symmetric matrix. `values` are sorted in
/// descending order and `vectors[k]` is the unit eigenvector paired with
/// `values[k]`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

const MAX_SWEEPS: usize = 64;

/// Full eigendecomposition by cyclic Jacobi rotations. Sweeps run until the
/// largest off-diagonal magnitude drops below `tol` times the Frobenius norm
/// of the input, so the reconstruction error `||A - V diag(w) V^T||_F` is of
/// the same order.
pub fn sym_eig(a: &SymMatrix, tol: f64) -> Result<SymEig, NumError> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(NumError::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let n = a.n();
    for (idx, &v) in a.entries().iter().enumerate() {
        if !v.is_finite() {
            return Err(NumError::NonFinite(idx / n.max(1), idx % n.max(1)));
        }
    }
    if n == 0 {
        return Ok(SymEig { values: vec![], vectors: vec![] });
    }

    let mut m = a.to_dense();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let fro = a.frobenius_norm();
    let thresh = tol * fro;

    if fro > 0.0 {
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            let mut off_max: f64 = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off_max = off_max.max(m[p * n + q].abs());
                }
            }
            if off_max < thresh {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = m[p * n + p];
                    let aqq = m[q * n + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    // Smaller-magnitude root of t^2 + 2*theta*t - 1 = 0 for stability.
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);

                    m[p * n + p] = app - t * apq;
                    m[q * n + q] = aqq + t * apq;
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    for k in 0..n {
                        if k == p || k == q {
                            continue;
                        }
                        let akp = m[k * n + p];
                        let akq = m[k * n + q];
                        let nkp = akp - s * (akq + tau * akp);
                        let nkq = akq + s * (akp - tau * akq);
                        m[k * n + p] = nkp;
                        m[p * n + k] = nkp;
                        m[k * n + q] = nkq;
                        m[q * n + k] = nkq;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = vkp - s * (vkq + tau * vkp);
                        v[k * n + q] = vkq + s * (vkp - tau * vkq);
                    }
                }
            }
        }
        if !converged {
            // One final check: the last sweep may have finished the job.
            let mut off_max: f64 = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off_max = off_max.max(m[p * n + q].abs());
                }
            }
            if off_max >= thresh {
                return Err(NumError::NoConvergence(format!(
                    "jacobi sweeps exhausted with off-diagonal {off_max:e} >= {thresh:e}"
                )));
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .expect("diagonal entries are finite")
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row * n + col]).collect())
        .collect();
    Ok(SymEig { values, vectors })
}
