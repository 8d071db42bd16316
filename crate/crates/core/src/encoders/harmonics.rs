//! Real orthonormal spherical harmonics.
//!
//! Associated Legendre values are computed fully normalised (the
//! `sqrt((2l+1)/4pi * (l-m)!/(l+m)!)` factor folded into the recurrence), so
//! high degrees neither overflow nor lose precision. No Condon-Shortley phase.

use std::f64::consts::PI;

use crate::geogrid::Coordinate;

use super::EncoderError;

/// Number of basis functions for maximum degree `max_degree`.
pub fn sh_basis_len(max_degree: usize) -> usize {
    (max_degree + 1) * (max_degree + 1)
}

/// Flat index of `(degree, order)`: degree-major, order running `-l..=l`.
pub fn sh_index(degree: usize, order: i64) -> usize {
    (degree * degree) as usize + (order + degree as i64) as usize
}

/// Normalised associated Legendre values `P̄_l^m(cos θ)` for `0 <= m <= l <= L`,
/// stored at `l(l+1)/2 + m`.
fn normalized_legendre(max_degree: usize, cos_t: f64, sin_t: f64) -> Vec<f64> {
    let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let mut p = vec![0.0; (max_degree + 1) * (max_degree + 2) / 2];
    p[0] = 1.0 / (4.0 * PI).sqrt();
    for m in 0..=max_degree {
        if m > 0 {
            let mf = m as f64;
            p[idx(m, m)] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * sin_t * p[idx(m - 1, m - 1)];
        }
        if m < max_degree {
            p[idx(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * cos_t * p[idx(m, m)];
        }
        for l in (m + 2)..=max_degree {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            p[idx(l, m)] = a * (cos_t * p[idx(l - 1, m)] - b * p[idx(l - 2, m)]);
        }
    }
    p
}

/// Real spherical harmonics `Y_l^m` up to degree `max_degree` at `c`, in
/// [`sh_index`] order. Positive orders carry `cos(m λ)`, negative orders
/// `sin(|m| λ)`.
pub fn sh_basis(c: &Coordinate, max_degree: usize) -> Vec<f64> {
    let mut out = vec![0.0; sh_basis_len(max_degree)];
    sh_basis_into(c, max_degree, &mut out);
    out
}

pub(crate) fn sh_basis_into(c: &Coordinate, max_degree: usize, out: &mut [f64]) {
    let (azimuth, polar) = c.to_spherical();
    // exact values at the poles, where sin(polar) must vanish
    let (cos_t, sin_t) = if c.lat() == 90.0 {
        (1.0, 0.0)
    } else if c.lat() == -90.0 {
        (-1.0, 0.0)
    } else {
        (polar.cos(), polar.sin())
    };
    let p = normalized_legendre(max_degree, cos_t, sin_t);
    for l in 0..=max_degree {
        let base = l * (l + 1) / 2;
        out[sh_index(l, 0)] = p[base];
        for m in 1..=l {
            let scaled = std::f64::consts::SQRT_2 * p[base + m];
            let angle = m as f64 * azimuth;
            out[sh_index(l, m as i64)] = scaled * angle.cos();
            out[sh_index(l, -(m as i64))] = scaled * angle.sin();
        }
    }
}

/// Elementwise product of trainable basis weights with the harmonics.
pub fn positional_encode(basis: &[f64], weights: &[f64]) -> Result<Vec<f64>, EncoderError> {
    if basis.len() != weights.len() {
        return Err(EncoderError::Dimension {
            what: "positional encoding weights",
            expected: basis.len(),
            actual: weights.len(),
        });
    }
    Ok(basis.iter().zip(weights).map(|(y, w)| y * w).collect())
}
