//! Minimal deterministic NN core with manual backprop.
//!
//! Generic over the float type: production training runs in `f32`, the
//! finite-difference gradient oracles instantiate the same code in `f64`.
//! All reductions run in a fixed order and matrix products are chunked at a
//! fixed block size, so results are bit-reproducible for a given seed
//! regardless of thread count.

pub mod adam;
pub mod layers;

pub use adam::Adam;

use ndarray::{Array2, ArrayD, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A trainable tensor: value plus accumulated gradient.
#[derive(Debug, Clone)]
pub struct ParamTensor<T: Scalar> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        ParamTensor { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Standard normal draws via Box-Muller; deterministic for a given RNG.
pub fn randn<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        out.push(T::from_f64(r * th.cos()));
        if out.len() < n {
            out.push(T::from_f64(r * th.sin()));
        }
    }
    out
}

/// He-uniform init for a weight with the given fan-in.
pub fn he_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// Rows per parallel chunk; fixed so the split never depends on the
/// machine's thread count.
const MM_CHUNK: usize = 256;

/// `a (m,k) x b (k,n)`, deterministic and rayon-parallel over row chunks.
pub fn matmul<T: Scalar>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Array2<T> {
    use ndarray::parallel::prelude::*;
    let m = a.nrows();
    let n = b.ncols();
    let mut c = Array2::<T>::zeros((m, n));
    if m >= 2 * MM_CHUNK {
        let a_chunks: Vec<_> = a.axis_chunks_iter(Axis(0), MM_CHUNK).collect();
        c.axis_chunks_iter_mut(Axis(0), MM_CHUNK)
            .into_par_iter()
            .zip(a_chunks.into_par_iter())
            .for_each(|(mut cc, aa)| {
                ndarray::linalg::general_mat_mul(T::one(), &aa, b, T::zero(), &mut cc);
            });
    } else {
        ndarray::linalg::general_mat_mul(T::one(), a, b, T::zero(), &mut c);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;

    #[test]
    fn matmul_matches_ndarray_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Array::from_shape_vec((700, 33), randn::<f64>(&mut rng, 700 * 33)).unwrap();
        let b = Array::from_shape_vec((33, 17), randn::<f64>(&mut rng, 33 * 17)).unwrap();
        let c = matmul(&a.view(), &b.view());
        let d = a.dot(&b);
        let max_diff = (&c - &d).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn randn_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(randn::<f64>(&mut r1, 11), randn::<f64>(&mut r2, 11));
    }
}
