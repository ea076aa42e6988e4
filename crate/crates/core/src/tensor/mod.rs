//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Just enough machinery for a small GPT: contiguous row-major tensors, a
//! [`tape::Tape`] recording primitive applications, and a finite-difference
//! gradient checker. Training runs in `f32`; the gradient-check harness
//! instantiates everything in `f64` through the [`Scalar`] trait.

pub mod gradcheck;
pub mod kernels;
pub mod tape;

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use rand_chacha::ChaCha8Rng;

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
///
/// The three matmul hooks exist so `f32` can route through the runtime
/// SIMD-dispatched kernels while `f64` keeps the portable generic loops.
pub trait Scalar:
    Float + num_traits::NumAssign + Sum + Send + Sync + fmt::Debug + fmt::Display + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `out += a (m x k) . b (k x n)`, row-major, `out` pre-zeroed by the caller.
    fn mm_block(a: &[Self], b: &[Self], out: &mut [Self], m: usize, k: usize, n: usize) {
        kernels::mm_generic(a, b, out, m, k, n);
    }

    /// `out += a (m x k) . b^T` where `b` is `n x k` row-major.
    fn mm_bt_block(a: &[Self], b: &[Self], out: &mut [Self], m: usize, k: usize, n: usize) {
        kernels::mm_bt_generic(a, b, out, m, k, n);
    }

    /// `out += a^T (p x m) . b (m x d)` for `a` stored `m x p`, restricted to
    /// output rows `p0..p1` (the parallel split dimension).
    fn mm_at_block(
        a: &[Self],
        b: &[Self],
        out: &mut [Self],
        m: usize,
        p: usize,
        d: usize,
        p0: usize,
        p1: usize,
    ) {
        kernels::mm_at_generic(a, b, out, m, p, d, p0, p1);
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn mm_block(a: &[Self], b: &[Self], out: &mut [Self], m: usize, k: usize, n: usize) {
        kernels::mm_f32(a, b, out, m, k, n);
    }
    fn mm_bt_block(a: &[Self], b: &[Self], out: &mut [Self], m: usize, k: usize, n: usize) {
        kernels::mm_bt_f32(a, b, out, m, k, n);
    }
    fn mm_at_block(
        a: &[Self],
        b: &[Self],
        out: &mut [Self],
        m: usize,
        p: usize,
        d: usize,
        p0: usize,
        p1: usize,
    ) {
        kernels::mm_at_f32(a, b, out, m, p, d, p0, p1);
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor with an explicit shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); len] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; len] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Panics if `data.len()` does not match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(data.len(), expect, "shape {:?} needs {} values, got {}", shape, expect, data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    /// Seeded normal draw with standard deviation `std`, mean zero.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0f64, std).expect("valid std");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| T::from_f64(normal.sample(rng))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Same data, new shape (must preserve element count).
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Size of the trailing dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elementwise via f64 (used to move between check and train precision).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}(", self.shape)?;
        let preview: Vec<String> = self.data.iter().take(8).map(|v| format!("{v:.4}")).collect();
        write!(f, "{}{})", preview.join(", "), if self.data.len() > 8 { ", .." } else { "" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f32>::randn(&[3, 4], 0.02, &mut r1);
        let b = Tensor::<f32>::randn(&[3, 4], 0.02, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let r = t.reshaped(&[3, 2]);
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    #[should_panic(expected = "needs")]
    fn from_vec_checks_len() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]);
    }
}
