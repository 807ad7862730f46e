use serde::{Deserialize, Serialize};

use super::NumError;

/// Dense symmetric matrix with full row-major storage. Construction
/// guarantees exact bitwise symmetry: off-diagonal values are computed or
/// assigned once and mirrored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, data: vec![0.0; n * n] }
    }

    /// Builds an n-by-n matrix by evaluating `f(i, j)` once per unordered
    /// pair `i <= j` and mirroring the value.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        m
    }

    /// Validates that `rows` is square, symmetric, and finite.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let n = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(NumError::Dimension { expected: n, found: r.len() });
            }
            for (j, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(NumError::NonFinite(i, j));
                }
                if rows[j][i] != v {
                    return Err(NumError::Asymmetric(i, j));
                }
            }
        }
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(SymMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets both (i, j) and (j, i).
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn to_dense(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_fn_is_exactly_symmetric() {
        let m = SymMatrix::from_fn(5, |i, j| ((i * 31 + j * 7) as f64).sin());
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn from_rows_rejects_asymmetry() {
        let rows = vec![vec![1.0, 2.0], vec![2.1, 1.0]];
        assert!(matches!(SymMatrix::from_rows(&rows), Err(NumError::Asymmetric(_, _))));
    }

    #[test]
    fn from_rows_rejects_non_finite() {
        let rows = vec![vec![1.0, f64::NAN], vec![f64::NAN, 1.0]];
        assert!(matches!(SymMatrix::from_rows(&rows), Err(NumError::NonFinite(_, _))));
    }
}
