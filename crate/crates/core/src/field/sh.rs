//! Second-order real spherical harmonics and per-image SH lighting.

use crate::error::{ensure, Error, Result};
use crate::imaging::Vec3;

pub const SH_C0: f64 = 0.282095;
pub const SH_C1: f64 = 0.488603;
pub const SH_C2: f64 = 1.092548;
pub const SH_C2_ZZ: f64 = 0.315392;
pub const SH_C2_XXYY: f64 = 0.546274;

/// Number of basis functions up to band 2.
pub const SH_COUNT: usize = 9;

/// Real SH basis up to band 2, ordered
/// `[1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2]` with their normalizing constants.
pub fn sh_basis(n: &Vec3) -> Result<[f64; SH_COUNT]> {
    let len = n.norm();
    ensure!((len - 1.0).abs() <= 1e-6, "SH basis needs a unit normal, |n| = {len}");
    Ok(sh_basis_unchecked(n))
}

pub fn sh_basis_unchecked(n: &Vec3) -> [f64; SH_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C2_ZZ * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C2_XXYY * (x * x - y * y),
    ]
}

/// 9x3 SH coefficients: one column of 9 band coefficients per RGB channel.
/// Stored row-major as `[k * 3 + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShLighting {
    coeffs: [f64; SH_COUNT * 3],
}

impl ShLighting {
    pub fn zeros() -> Self {
        Self {
            coeffs: [0.0; SH_COUNT * 3],
        }
    }

    /// Constant lighting whose shading returns the albedo unchanged.
    pub fn dc_cancel() -> Self {
        let mut l = Self::zeros();
        for c in 0..3 {
            l.set(0, c, 1.0 / SH_C0);
        }
        l
    }

    /// Band-0/1 lighting with irradiance `ambient + strength * dot(d, n)`
    /// for unit direction `d`.
    pub fn ambient_directional(ambient: [f64; 3], direction: &Vec3, strength: [f64; 3]) -> Result<Self> {
        let d = direction
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("light direction must be non-zero"))?;
        let mut l = Self::zeros();
        for c in 0..3 {
            l.set(0, c, ambient[c] / SH_C0);
            l.set(1, c, strength[c] * d.y / SH_C1);
            l.set(2, c, strength[c] * d.z / SH_C1);
            l.set(3, c, strength[c] * d.x / SH_C1);
        }
        Ok(l)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != SH_COUNT * 3 {
            return Err(Error::shape(format!("SH lighting needs 27 values, got {}", values.len())));
        }
        ensure!(values.iter().all(|v| v.is_finite()), "SH lighting coefficients must be finite");
        let mut coeffs = [0.0; SH_COUNT * 3];
        coeffs.copy_from_slice(values);
        Ok(Self { coeffs })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.coeffs[k * 3 + c]
    }

    pub fn set(&mut self, k: usize, c: usize, v: f64) {
        self.coeffs[k * 3 + c] = v;
    }

    /// `L^T b(n)` per channel.
    pub fn irradiance_from_basis(&self, basis: &[f64; SH_COUNT]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, b) in basis.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.coeffs[k * 3 + c] * b;
            }
        }
        out
    }

    pub fn irradiance(&self, n: &Vec3) -> [f64; 3] {
        self.irradiance_from_basis(&sh_basis_unchecked(n))
    }

    /// Per-coefficient mean of several lightings.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ShLighting>) -> Option<ShLighting> {
        let mut acc = Self::zeros();
        let mut n = 0usize;
        for l in items {
            for (a, v) in acc.coeffs.iter_mut().zip(l.coeffs.iter()) {
                *a += v;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        for a in &mut acc.coeffs {
            *a /= n as f64;
        }
        Some(acc)
    }

    pub fn scaled_add(&self, alpha: f64, other: &ShLighting, beta: f64) -> ShLighting {
        let mut out = Self::zeros();
        for i in 0..out.coeffs.len() {
            out.coeffs[i] = alpha * self.coeffs[i] + beta * other.coeffs[i];
        }
        out
    }
}

/// Lambertian SH shading: `albedo_c * sum_k L[k, c] b_k(n)`, unclamped.
pub fn shade(albedo: [f64; 3], lighting: &ShLighting, n: &Vec3) -> Result<[f64; 3]> {
    let basis = sh_basis(n)?;
    let e = lighting.irradiance_from_basis(&basis);
    Ok([albedo[0] * e[0], albedo[1] * e[1], albedo[2] * e[2]])
}
