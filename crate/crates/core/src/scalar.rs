use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point element type for tensors and models.
///
/// `f32` is the training precision; `f64` backs the finite-difference
/// gradient oracles where the 1e-5 relative tolerance is meaningful.
pub trait Scalar:
    Float
    + NumAssignOps
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// C := alpha * A·B + beta * C with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers must be valid for the strided `m x k`, `k x n`, `m x n`
    /// accesses implied by the stride arguments.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Shorthand for converting literal constants into the scalar type.
#[inline]
pub fn c<S: Scalar>(v: f64) -> S {
    S::from_f64(v)
}
