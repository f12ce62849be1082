//! Symmetric positive-definite skyline (envelope) Cholesky.
//!
//! The P1 stiffness blocks assembled on ring-ordered disk meshes have a tight
//! envelope (each node couples only to its own and adjacent rings), so an
//! envelope factorization does essentially no work outside true fill. The
//! column profile is computed once per mesh and reused for every assembly.

use std::sync::Arc;

use crate::error::{CoreError, Result};

/// Column profile of a symmetric matrix: for each row `i`, the first column
/// `start[i] <= i` that can hold a nonzero. Rows are stored packed.
#[derive(Debug)]
pub struct SkylinePattern {
    start: Vec<usize>,
    row_ptr: Vec<usize>,
}

impl SkylinePattern {
    /// Build a profile from symmetric coupling pairs `(i, j)`.
    pub fn from_pairs(n: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Arc<Self> {
        let mut start: Vec<usize> = (0..n).collect();
        for (i, j) in pairs {
            let (row, col) = if i >= j { (i, j) } else { (j, i) };
            if col < start[row] {
                start[row] = col;
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        for i in 0..n {
            row_ptr.push(row_ptr[i] + (i - start[i] + 1));
        }
        Arc::new(SkylinePattern { start, row_ptr })
    }

    pub fn n(&self) -> usize {
        self.start.len()
    }

    pub fn nnz(&self) -> usize {
        *self.row_ptr.last().unwrap_or(&0)
    }
}

/// Lower-triangle values stored on a shared [`SkylinePattern`].
#[derive(Debug, Clone)]
pub struct SkylineMatrix {
    pattern: Arc<SkylinePattern>,
    values: Vec<f64>,
}

impl SkylineMatrix {
    pub fn zeroed(pattern: Arc<SkylinePattern>) -> Self {
        let nnz = pattern.nnz();
        SkylineMatrix {
            pattern,
            values: vec![0.0; nnz],
        }
    }

    /// Accumulate `v` at `(i, j)`; only the lower triangle is stored, so the
    /// caller passes each symmetric pair once with `i >= j`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && j >= self.pattern.start[i]);
        let idx = self.pattern.row_ptr[i] + (j - self.pattern.start[i]);
        self.values[idx] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (row, col) = if i >= j { (i, j) } else { (j, i) };
        if col < self.pattern.start[row] {
            return 0.0;
        }
        self.values[self.pattern.row_ptr[row] + (col - self.pattern.start[row])]
    }

    /// In-place LL^T factorization. Fails if the matrix is not numerically
    /// positive definite.
    pub fn factorize(mut self) -> Result<SkylineFactor> {
        let n = self.pattern.n();
        let start = &self.pattern.start;
        let row_ptr = &self.pattern.row_ptr;
        for i in 0..n {
            let ci = start[i];
            for j in ci..=i {
                let cj = start[j];
                let kmin = ci.max(cj);
                let mut sum = self.values[row_ptr[i] + (j - ci)];
                if kmin < j {
                    let a = &self.values[row_ptr[i] + (kmin - ci)..row_ptr[i] + (j - ci)];
                    let b = &self.values[row_ptr[j] + (kmin - cj)..row_ptr[j] + (j - cj)];
                    let mut dot = 0.0;
                    for (x, y) in a.iter().zip(b) {
                        dot += x * y;
                    }
                    sum -= dot;
                }
                if j < i {
                    let d = self.values[row_ptr[j] + (j - cj)];
                    self.values[row_ptr[i] + (j - ci)] = sum / d;
                } else {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(CoreError::numerical(format!(
                            "skyline Cholesky broke down at pivot {i} (value {sum:e})"
                        )));
                    }
                    self.values[row_ptr[i] + (j - ci)] = sum.sqrt();
                }
            }
        }
        Ok(SkylineFactor {
            pattern: self.pattern,
            values: self.values,
        })
    }
}

/// Cholesky factor `L` on the skyline profile; solves `L L^T x = b`.
#[derive(Debug)]
pub struct SkylineFactor {
    pattern: Arc<SkylinePattern>,
    values: Vec<f64>,
}

impl SkylineFactor {
    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.pattern.n();
        assert_eq!(b.len(), n);
        let start = &self.pattern.start;
        let row_ptr = &self.pattern.row_ptr;
        // Forward: L y = b.
        for i in 0..n {
            let ci = start[i];
            let row = &self.values[row_ptr[i]..row_ptr[i + 1]];
            let mut sum = b[i];
            for (k, lik) in row[..i - ci].iter().enumerate() {
                sum -= lik * b[ci + k];
            }
            b[i] = sum / row[i - ci];
        }
        // Backward: L^T x = y, sweeping columns of L^T as rows of L.
        for j in (0..n).rev() {
            let cj = start[j];
            let row = &self.values[row_ptr[j]..row_ptr[j + 1]];
            let xj = b[j] / row[j - cj];
            b[j] = xj;
            for (k, ljk) in row[..j - cj].iter().enumerate() {
                b[cj + k] -= ljk * xj;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
            .collect()
    }

    #[test]
    fn factors_and_solves_banded_spd() {
        // Diagonally dominant tridiagonal-plus-corner profile.
        let n = 40;
        let pairs = (1..n).map(|i| (i, i - 1)).chain(std::iter::once((n - 1, n - 4)));
        let pattern = SkylinePattern::from_pairs(n, pairs);
        let mut m = SkylineMatrix::zeroed(pattern);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            m.add(i, i, 4.0 + i as f64 * 0.01);
            dense[i][i] = 4.0 + i as f64 * 0.01;
        }
        for i in 1..n {
            m.add(i, i - 1, -1.0);
            dense[i][i - 1] = -1.0;
            dense[i - 1][i] = -1.0;
        }
        m.add(n - 1, n - 4, 0.5);
        dense[n - 1][n - 4] = 0.5;
        dense[n - 4][n - 1] = 0.5;

        let factor = m.factorize().unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = factor.solve(&b);
        let back = dense_matvec(&dense, &x);
        for (bi, ri) in b.iter().zip(&back) {
            assert!((bi - ri).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let pattern = SkylinePattern::from_pairs(2, std::iter::once((1, 0)));
        let mut m = SkylineMatrix::zeroed(pattern);
        m.add(0, 0, 1.0);
        m.add(1, 0, 3.0);
        m.add(1, 1, 1.0); // leading 2x2 has negative Schur complement
        assert!(m.factorize().is_err());
    }
}
