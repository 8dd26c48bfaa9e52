//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| G::of(x.to_f64().unwrap())).collect() }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = F::zero());
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64().unwrap().powi(2)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize it.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy<F: Scalar>(a: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// `y[n x out] = x[n x inp] * w[out x inp]^T`
pub fn matmul_t<F: Scalar>(x: &[F], n: usize, inp: usize, w: &[F], out: usize, y: &mut [F]) {
    debug_assert_eq!(x.len(), n * inp);
    debug_assert_eq!(w.len(), out * inp);
    debug_assert_eq!(y.len(), n * out);
    for t in 0..n {
        let xt = &x[t * inp..(t + 1) * inp];
        let yt = &mut y[t * out..(t + 1) * out];
        for (o, yo) in yt.iter_mut().enumerate() {
            *yo = dot(xt, &w[o * inp..(o + 1) * inp]);
        }
    }
}

/// Backward of [`matmul_t`]: `dx += dy * w` and, when given, `dw += dy^T * x`.
pub fn matmul_t_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    n: usize,
    inp: usize,
    w: &[F],
    out: usize,
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
) {
    if let Some(dx) = dx {
        for t in 0..n {
            let dxt = &mut dx[t * inp..(t + 1) * inp];
            for o in 0..out {
                let g = dy[t * out + o];
                if g != F::zero() {
                    axpy(g, &w[o * inp..(o + 1) * inp], dxt);
                }
            }
        }
    }
    if let Some(dw) = dw {
        for o in 0..out {
            let dwo = &mut dw[o * inp..(o + 1) * inp];
            for t in 0..n {
                let g = dy[t * out + o];
                if g != F::zero() {
                    axpy(g, &x[t * inp..(t + 1) * inp], dwo);
                }
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns per-row `(mean, rstd)`.
pub fn layer_norm<F: Scalar>(x: &[F], n: usize, d: usize, g: &[F], b: &[F], y: &mut [F], stats: &mut [(F, F)]) {
    let dn = F::of(d as f64);
    let eps = F::of(LN_EPS);
    for t in 0..n {
        let xt = &x[t * d..(t + 1) * d];
        let mean = xt.iter().copied().sum::<F>() / dn;
        let var = xt.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
        let rstd = F::one() / (var + eps).sqrt();
        for i in 0..d {
            y[t * d + i] = (xt[i] - mean) * rstd * g[i] + b[i];
        }
        stats[t] = (mean, rstd);
    }
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    n: usize,
    d: usize,
    g: &[F],
    stats: &[(F, F)],
    dx: &mut [F],
    mut dg: Option<&mut [F]>,
    mut db: Option<&mut [F]>,
) {
    let dn = F::of(d as f64);
    for t in 0..n {
        let (mean, rstd) = stats[t];
        let xt = &x[t * d..(t + 1) * d];
        let dyt = &dy[t * d..(t + 1) * d];
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for i in 0..d {
            let xhat = (xt[i] - mean) * rstd;
            let dxhat = dyt[i] * g[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if let Some(dg) = dg.as_deref_mut() {
                dg[i] += dyt[i] * xhat;
            }
            if let Some(db) = db.as_deref_mut() {
                db[i] += dyt[i];
            }
        }
        let (m1, m2) = (sum_dxhat / dn, sum_dxhat_xhat / dn);
        for i in 0..d {
            let xhat = (xt[i] - mean) * rstd;
            let dxhat = dyt[i] * g[i];
            dx[t * d + i] += rstd * (dxhat - m1 - xhat * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(0.044715) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(0.044715) * x * x * x);
    let th = inner.tanh();
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * 0.044715) * x * x);
    half * (F::one() + th) + half * x * (F::one() - th * th) * dinner
}

/// In-place softmax of one row, max-subtracted.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_backward_matches_definition() {
        let (n, inp, out) = (3, 5, 4);
        let x: Vec<f64> = (0..n * inp).map(|i| (i as f64).sin()).collect();
        let w: Vec<f64> = (0..out * inp).map(|i| (i as f64 * 0.7).cos()).collect();
        let dy: Vec<f64> = (0..n * out).map(|i| (i as f64 * 1.3).sin()).collect();
        let mut dx = vec![0.0; n * inp];
        let mut dw = vec![0.0; out * inp];
        matmul_t_backward(&dy, &x, n, inp, &w, out, Some(&mut dx), Some(&mut dw));
        for t in 0..n {
            for i in 0..inp {
                let e: f64 = (0..out).map(|o| dy[t * out + o] * w[o * inp + i]).sum();
                assert!((dx[t * inp + i] - e).abs() < 1e-12);
            }
        }
        for o in 0..out {
            for i in 0..inp {
                let e: f64 = (0..n).map(|t| dy[t * out + o] * x[t * inp + i]).sum();
                assert!((dw[o * inp + i] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut row = vec![1000.0f32, -3.0, 2.5, 0.0, 999.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
