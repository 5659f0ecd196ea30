//! Sinusoidal encoding of `(x, y, z, t)`.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Shortest and longest wavelengths for the spatial blocks (meters) and the time block (frames).
pub const SPATIAL_WAVELENGTHS: (f64, f64) = (1.0, 200.0);
pub const TEMPORAL_WAVELENGTHS: (f64, f64) = (1.0, 16.0);

fn wavelengths(n: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
        .collect()
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim % 8 != 0 {
        return Err(Error::Shape(format!("encoding width {dim} must be a positive multiple of 8")));
    }
    Ok(())
}

/// `[N, dim]` encoding: four blocks of `dim/4` (x, y, z, t), each alternating
/// `sin, cos` over a geometric wavelength ladder.
pub fn positional_encoding_4d<T: Scalar>(positions: &Tensor<T>, timestamps: &[usize], dim: usize) -> Result<Tensor<T>> {
    check_dim(dim)?;
    let n = positions.rows();
    if positions.cols() != 3 {
        return Err(Error::Shape("positions must be [N, 3]".into()));
    }
    if timestamps.len() != n {
        return Err(Error::LengthMismatch {
            what: "encoding timestamps",
            left: timestamps.len(),
            right: n,
        });
    }
    let block = dim / 4;
    let space = wavelengths(block / 2, SPATIAL_WAVELENGTHS);
    let time = wavelengths(block / 2, TEMPORAL_WAVELENGTHS);
    let mut out = Tensor::zeros(&[n, dim]);
    for i in 0..n {
        let p = positions.row(i);
        let coords = [p[0].f64(), p[1].f64(), p[2].f64(), timestamps[i] as f64];
        let row = out.row_mut(i);
        for (c, &v) in coords.iter().enumerate() {
            let lam = if c < 3 { &space } else { &time };
            for (k, &l) in lam.iter().enumerate() {
                let a = TAU * v / l;
                row[c * block + 2 * k] = T::of(a.sin());
                row[c * block + 2 * k + 1] = T::of(a.cos());
            }
        }
    }
    Ok(out)
}

/// Gradient of `Σ d_out ⊙ PE` with respect to the spatial coordinates.
pub fn positional_encoding_backward<T: Scalar>(positions: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let n = positions.rows();
    let dim = d_out.cols();
    check_dim(dim)?;
    if d_out.rows() != n {
        return Err(Error::Shape("encoding gradient rows".into()));
    }
    let block = dim / 4;
    let space = wavelengths(block / 2, SPATIAL_WAVELENGTHS);
    let mut dp = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        let g = d_out.row(i);
        for c in 0..3 {
            let v = positions.row(i)[c].f64();
            let mut acc = 0.0;
            for (k, &l) in space.iter().enumerate() {
                let w = TAU / l;
                let a = w * v;
                acc += g[c * block + 2 * k].f64() * w * a.cos() - g[c * block + 2 * k + 1].f64() * w * a.sin();
            }
            dp.row_mut(i)[c] = T::of(acc);
        }
    }
    Ok(dp)
}
