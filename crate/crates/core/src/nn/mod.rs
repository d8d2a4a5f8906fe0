//! Minimal layer library with hand-written backward passes.
//!
//! Feature maps are single-sample `(C, H, W)` arrays in standard layout.
//! Every layer exposes `forward(&self, ..) -> (output, cache)` and
//! `backward(&mut self, &cache, grad_out) -> grad_in`; parameter gradients
//! accumulate into [`Param::grad`] until the optimizer clears them.

pub mod cab;
pub mod convnext;
pub mod csca;
pub mod net;
pub mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar type the layers are generic over (`f32` for training, `f64` for
/// gradient checks).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `C = alpha * A·B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn c(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap()
    }

    #[inline]
    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: slice lengths checked above; strides describe
                // dense row- or column-major views inside those slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// `C (m×n) = op(A) · op(B) (+ C)`, all dense row-major.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_strided(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// A learnable tensor and its accumulated gradient, both flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Float> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![v; n],
            grad: vec![T::zero(); n],
            shape: shape.to_vec(),
        }
    }

    /// Normal draw with std `sqrt(2/fan_in)`, resampled outside two std.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let value = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::c(z * std);
                }
            })
            .collect();
        Self {
            value,
            grad: vec![T::zero(); n],
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns parameters.
pub trait Module<T: Float> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub mod gradcheck {
    //! Central finite differences against analytic gradients, in f64.

    use super::*;
    use ndarray::Array3;

    pub const EPS: f64 = 1e-6;

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    /// Check d(loss)/d(input) where `loss = Σ w ⊙ f(x)`.
    pub fn check_input<F>(x: &Array3<f64>, w: &Array3<f64>, analytic: &Array3<f64>, mut f: F) -> f64
    where
        F: FnMut(&Array3<f64>) -> Array3<f64>,
    {
        let mut worst: f64 = 0.0;
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.as_slice().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = orig + EPS;
            let lp = (&f(&xp) * w).sum();
            xp.as_slice_mut().unwrap()[i] = orig - EPS;
            let lm = (&f(&xp) * w).sum();
            xp.as_slice_mut().unwrap()[i] = orig;
            let num = (lp - lm) / (2.0 * EPS);
            worst = worst.max(rel_err(num, analytic.as_slice().unwrap()[i]));
        }
        worst
    }

    /// Check every parameter of `module`; `loss` recomputes the scalar objective.
    pub fn check_params<M, L>(module: &mut M, mut loss: L) -> f64
    where
        M: Module<f64>,
        L: FnMut(&M) -> f64,
    {
        let mut analytic = Vec::new();
        module.visit_params("", &mut |_, p| analytic.push(p.grad.clone()));
        let mut worst: f64 = 0.0;
        let n_params = analytic.len();
        for pi in 0..n_params {
            for i in 0..analytic[pi].len() {
                let nudge = |m: &mut M, delta: f64| {
                    let mut k = 0;
                    m.visit_params_mut("", &mut |_, p| {
                        if k == pi {
                            p.value[i] += delta;
                        }
                        k += 1;
                    });
                };
                nudge(module, EPS);
                let lp = loss(module);
                nudge(module, -2.0 * EPS);
                let lm = loss(module);
                nudge(module, EPS);
                let num = (lp - lm) / (2.0 * EPS);
                worst = worst.max(rel_err(num, analytic[pi][i]));
            }
        }
        worst
    }
}
