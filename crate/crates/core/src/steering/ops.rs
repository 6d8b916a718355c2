//! Sequence-axis resampling and the two refinement updates.
//!
//! All functions treat a [`Matrix`] as N positions × d channels and act
//! along the position axis only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Divisor used by [`avg_pool_1d`] for each window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolNorm {
    /// Number of in-bounds positions in the window (a true mean).
    #[default]
    #[serde(rename = "count")]
    Count,
    /// The kernel size k, regardless of window size or clipping.
    #[serde(rename = "k")]
    Kernel,
}

/// Shape of the per-position intensity profile in spatial mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    #[default]
    Cosine,
    /// Flat profile at the full scale.
    Constant,
}

/// Sliding-window average along the sequence axis.
///
/// Position i averages positions `i - k/2 ..= i + k/2`, clipped to the
/// sequence. The output has the input's shape.
pub fn avg_pool_1d(h: &Matrix, k: usize, norm: PoolNorm) -> Result<Matrix> {
    if k < 1 {
        return Err(Error::Config("pooling kernel must be at least 1".into()));
    }
    let (n, d) = h.shape();
    let half = k / 2;
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n.saturating_sub(1));
        let divisor = match norm {
            PoolNorm::Count => (hi - lo + 1) as f32,
            PoolNorm::Kernel => k as f32,
        };
        let row = out.row_mut(i);
        for j in lo..=hi {
            for (o, &v) in row.iter_mut().zip(h.row(j)) {
                *o += v;
            }
        }
        for o in row.iter_mut() {
            *o /= divisor;
        }
    }
    Ok(out)
}

/// `h_x + alpha * (A(h_y) - A(h_x))` with `A` = [`avg_pool_1d`].
pub fn ilrr_update(
    h_x: &Matrix,
    h_y: &Matrix,
    alpha: f32,
    k: usize,
    norm: PoolNorm,
) -> Result<Matrix> {
    if h_x.shape() != h_y.shape() {
        return Err(Error::Contract(format!(
            "generation activations {:?} and reference activations {:?} differ in shape",
            h_x.shape(),
            h_y.shape()
        )));
    }
    check_alpha(alpha)?;
    let delta = avg_pool_1d(h_y, k, norm)?.sub(&avg_pool_1d(h_x, k, norm)?)?;
    let mut out = h_x.clone();
    for (o, &dv) in out.data_mut().iter_mut().zip(delta.data()) {
        *o += alpha * dv;
    }
    Ok(out)
}

/// Mean over `target` contiguous intervals `[⌊i·N/target⌋, ⌊(i+1)·N/target⌋)`.
pub fn adaptive_downsample(h: &Matrix, target: usize) -> Result<Matrix> {
    let (n, d) = h.shape();
    if target < 1 || target > n {
        return Err(Error::Contract(format!(
            "cannot downsample {n} positions to {target}"
        )));
    }
    let mut out = Matrix::zeros(target, d);
    for i in 0..target {
        let start = i * n / target;
        let end = (i + 1) * n / target;
        let row = out.row_mut(i);
        for j in start..end {
            for (o, &v) in row.iter_mut().zip(h.row(j)) {
                *o += v;
            }
        }
        let inv = 1.0 / (end - start) as f32;
        row.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(out)
}

/// Endpoint-aligned linear interpolation to `target` positions.
///
/// Output j samples source coordinate `j·(N−1)/(target−1)`; a single
/// source row is broadcast.
pub fn linear_upsample(h: &Matrix, target: usize) -> Result<Matrix> {
    let (n, d) = h.shape();
    if n < 1 || target < n {
        return Err(Error::Contract(format!(
            "cannot upsample {n} positions to {target}"
        )));
    }
    let mut out = Matrix::zeros(target, d);
    for j in 0..target {
        let row = out.row_mut(j);
        if n == 1 || target == 1 {
            row.copy_from_slice(h.row(0));
            continue;
        }
        let pos = (j * (n - 1)) as f64 / (target - 1) as f64;
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = (pos - i0 as f64) as f32;
        for ((o, &a), &b) in row.iter_mut().zip(h.row(i0)).zip(h.row(i1)) {
            *o = a + frac * (b - a);
        }
    }
    Ok(out)
}

/// Per-position steering intensity: `(alpha/2)·(1 + cos(2π·f·i/N))` for the
/// cosine profile, `alpha` everywhere for the constant one.
pub fn modulation_wave(alpha: f32, freq: f64, n: usize, waveform: Waveform) -> Vec<f32> {
    match waveform {
        Waveform::Constant => vec![alpha; n],
        Waveform::Cosine => (0..n)
            .map(|i| {
                let phase = std::f64::consts::TAU * freq * i as f64 / n as f64;
                (alpha as f64 / 2.0 * (1.0 + phase.cos())) as f32
            })
            .collect(),
    }
}

/// Steering update for a reference shorter than the generation.
///
/// Pools both streams, compresses the generation's pooled stream to the
/// reference length, upsamples the difference back to the generation
/// length and adds it scaled by the modulation profile `weights`
/// (one scalar per generation position, broadcast over channels).
pub fn spatially_modulated_update(
    h_x: &Matrix,
    h_y: &Matrix,
    weights: &[f32],
    k: usize,
    norm: PoolNorm,
) -> Result<Matrix> {
    let (nx, d) = h_x.shape();
    let (ny, dy) = h_y.shape();
    if d != dy {
        return Err(Error::Contract(format!(
            "hidden sizes differ: generation {d}, reference {dy}"
        )));
    }
    if ny > nx || ny == 0 {
        return Err(Error::Contract(format!(
            "spatial steering needs a non-empty reference no longer than the generation ({ny} > {nx}); use standard mode"
        )));
    }
    if weights.len() != nx {
        return Err(Error::Contract(format!(
            "modulation profile has {} entries for {nx} positions",
            weights.len()
        )));
    }
    let pooled_x = adaptive_downsample(&avg_pool_1d(h_x, k, norm)?, ny)?;
    let diff = avg_pool_1d(h_y, k, norm)?.sub(&pooled_x)?;
    let direction = linear_upsample(&diff, nx)?;
    let mut out = h_x.clone();
    for (i, &w) in weights.iter().enumerate() {
        for (o, &v) in out.row_mut(i).iter_mut().zip(direction.row(i)) {
            *o += w * v;
        }
    }
    Ok(out)
}

fn check_alpha(alpha: f32) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "steering scale must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}
