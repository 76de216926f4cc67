//! Flat dense vector used for images, gradients and noise.

use crate::num::Real;

/// A dense vector of scalars.
///
/// Image-role vectors additionally keep every entry in `[0, 1]`; that
/// constraint is enforced by the operations that produce images (dataset
/// generation, projections, clamps), not by the type itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector<R> {
    data: Vec<R>,
}

impl<R: Real> Vector<R> {
    pub fn new(data: Vec<R>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![R::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[R] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, R> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// True when every entry lies in the unit interval.
    pub fn in_unit_cube(&self) -> bool {
        self.data.iter().all(|&x| x >= R::zero() && x <= R::one())
    }

    pub fn dot(&self, other: &Self) -> R {
        debug_assert_eq!(self.dim(), other.dim());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm_l2(&self) -> R {
        self.dot(self).sqrt()
    }

    pub fn norm_linf(&self) -> R {
        self.data
            .iter()
            .fold(R::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// `self + t * other`, elementwise.
    pub fn axpy(&self, t: R, other: &Self) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + t * b)
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(R::one(), other)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(-R::one(), other)
    }

    pub fn scale(&self, t: R) -> Self {
        Self {
            data: self.data.iter().map(|&a| a * t).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, t: R) {
        for a in self.data.iter_mut() {
            *a *= t;
        }
    }
}

impl<R: Real> std::ops::Index<usize> for Vector<R> {
    type Output = R;
    fn index(&self, i: usize) -> &R {
        &self.data[i]
    }
}

impl<R: Real> std::ops::IndexMut<usize> for Vector<R> {
    fn index_mut(&mut self, i: usize) -> &mut R {
        &mut self.data[i]
    }
}

impl<R: Real> FromIterator<R> for Vector<R> {
    fn from_iter<I: IntoIterator<Item = R>>(iter: I) -> Self {
        Self {
            data: iter.into_iter().collect(),
        }
    }
}

impl<R: Real> From<Vec<R>> for Vector<R> {
    fn from(data: Vec<R>) -> Self {
        Self { data }
    }
}
