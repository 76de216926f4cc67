//! Small dense matrices for the Jacobian diagnostics.
//!
//! Everything here runs at dimensions of at most a few dozen; clarity beats
//! cleverness.

use crate::num::{real, Real};
use crate::vector::Vector;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<R> {
    data: Vec<R>,
    rows: usize,
    cols: usize,
}

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![R::zero(); rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = R::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vector<R>]) -> Self {
        let ncols = rows.first().map_or(0, Vector::dim);
        let mut m = Self::zeros(rows.len(), ncols);
        for (i, r) in rows.iter().enumerate() {
            debug_assert_eq!(r.dim(), ncols);
            for j in 0..ncols {
                m[(i, j)] = r[j];
            }
        }
        m
    }

    /// Rank-one matrix `a * b^T`.
    pub fn outer(a: &Vector<R>, b: &Vector<R>) -> Self {
        let mut m = Self::zeros(a.dim(), b.dim());
        for i in 0..a.dim() {
            for j in 0..b.dim() {
                m[(i, j)] = a[i] * b[j];
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mul_vec(&self, v: &Vector<R>) -> Vector<R> {
        debug_assert_eq!(self.cols, v.dim());
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn transpose_mul_vec(&self, v: &Vector<R>) -> Vector<R> {
        debug_assert_eq!(self.rows, v.dim());
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)] * v[i]).sum())
            .collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.rows);
        let mut m = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    m[(i, j)] += a * other[(k, j)];
                }
            }
        }
        m
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn scale(&self, t: R) -> Self {
        Self {
            data: self.data.iter().map(|&a| a * t).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> R {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(R::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Symmetrizes in place: `(A + A^T) / 2`.
    pub fn symmetrize(&mut self) {
        debug_assert_eq!(self.rows, self.cols);
        let half = real::<R>(0.5);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = (self[(i, j)] + self[(j, i)]) * half;
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }
}

impl<R: Real> std::ops::Index<(usize, usize)> for Mat<R> {
    type Output = R;
    fn index(&self, (i, j): (usize, usize)) -> &R {
        &self.data[i * self.cols + j]
    }
}

impl<R: Real> std::ops::IndexMut<(usize, usize)> for Mat<R> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut R {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
///
/// Converges quadratically; at the dimensions used here (<= 16) a handful of
/// sweeps reaches machine precision.
pub fn symmetric_eigenvalues<R: Real>(a: &Mat<R>) -> Vec<R> {
    assert_eq!(a.rows(), a.cols(), "eigenvalues need a square matrix");
    let n = a.rows();
    let mut m = a.clone();
    let tol = real::<R>(1e-14);
    let half = real::<R>(0.5);

    for _sweep in 0..64 {
        let mut off = R::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        let scale: R = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum::<R>() + off;
        if off <= tol * tol * (scale + R::one()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == R::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) * half / apq;
                // Stable rotation from the standard Jacobi recurrence.
                let t = {
                    let sign = if theta >= R::zero() { R::one() } else { -R::one() };
                    sign / (theta.abs() + (theta * theta + R::one()).sqrt())
                };
                let c = R::one() / (t * t + R::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[(i, i)]).collect()
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_radius_symmetric<R: Real>(a: &Mat<R>) -> R {
    symmetric_eigenvalues(a)
        .into_iter()
        .fold(R::zero(), |acc, l| acc.max(l.abs()))
}
