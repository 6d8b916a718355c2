use crate::error::{Error, Result};

use super::matrix::{Matrix, Scalar};

pub const LN_EPS: f64 = 1e-5;

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    if out.cols() == 0 {
        return out;
    }
    let cols = out.cols();
    for row in out.data_mut().chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    out
}

/// Log of the softmax normalizer of a row.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Layer normalization of a single vector followed by an affine map.
pub fn layer_norm<T: Scalar>(v: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(Error::Shape(format!(
            "layer_norm lengths {} / {} / {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let (mean, rstd) = moments(v, eps);
    Ok(v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&x, (&g, &b))| (x - mean) * rstd * g + b)
        .collect())
}

fn moments<T: Scalar>(v: &[T], eps: T) -> (T, T) {
    let n = T::from(v.len()).unwrap();
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt().recip())
}

/// Output of a row-wise layer norm, with what the backward pass needs.
pub(crate) struct LayerNormOut<T: Scalar> {
    pub y: Matrix<T>,
    pub xhat: Matrix<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_rows<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T]) -> LayerNormOut<T> {
    let (n, d) = x.shape();
    let eps = T::lit(LN_EPS);
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let (mean, rs) = moments(row, eps);
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for ((o, h), (&g, &b)) in y.row_mut(r).iter_mut().zip(xh).zip(gain.iter().zip(bias)) {
            *o = h * g + b;
        }
    }
    LayerNormOut { y, xhat, rstd }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; several times faster than the libm call
/// and saturates correctly at both ends.
#[inline]
fn tanh_exp<T: Scalar>(u: T) -> T {
    T::one() - T::lit(2.0) / (T::one() + (u + u).exp())
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + tanh_exp(c * (x + a * x * x * x)))
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = tanh_exp(inner);
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + T::lit(3.0) * a * x * x)
}
