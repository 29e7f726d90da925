//! Small dense symmetric positive-definite kernels.

use alloc::vec::Vec;

/// Lower Cholesky factor of a row-major `n x n` SPD matrix, stored row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Returns `None` when a pivot is not strictly positive.
    pub fn factor(a: &[f64], n: usize) -> Option<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = a.to_vec();
        for j in 0..n {
            let (done, rest) = l.split_at_mut((j + 1) * n);
            let row_j = &mut done[j * n..];
            let diag = row_j[j] - row_j[..j].iter().map(|v| v * v).sum::<f64>();
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let djj = libm::sqrt(diag);
            row_j[j] = djj;
            row_j[j + 1..].iter_mut().for_each(|v| *v = 0.0);
            let row_j = &done[j * n..j * n + j];
            for row_i in rest.chunks_exact_mut(n) {
                let s = row_i[j] - row_i[..j].iter().zip(row_j).map(|(a, b)| a * b).sum::<f64>();
                row_i[j] = s / djj;
            }
        }
        Some(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.l[k * n + i] * b[k]).sum();
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
    }
}
