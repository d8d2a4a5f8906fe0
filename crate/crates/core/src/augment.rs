//! Random amplitude perturbation in the 2D spatial-frequency domain.
//!
//! Each channel plane has its mean removed, is transformed, has a random
//! subset of bins scaled by `1 + γ·ξ`, and is transformed back with the mean
//! restored. Bin phases are left untouched.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::masking::CsiTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Maximum strength γ.
    pub gamma: f64,
    /// Probability μ that a bin is perturbed.
    pub mu: f64,
    pub enabled: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            mu: 0.05,
            enabled: true,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidArgument(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        Ok(())
    }
}

/// Real per-bin factors with `f[-k,-l] = f[k,l]`.
pub fn factor_field<R: Rng + ?Sized>(h: usize, w: usize, cfg: &PerturbConfig, rng: &mut R) -> Vec<f64> {
    let mut f = vec![1.0; h * w];
    for k in 0..h {
        for l in 0..w {
            let idx = k * w + l;
            let partner = ((h - k) % h) * w + (w - l) % w;
            if partner < idx {
                f[idx] = f[partner];
                continue;
            }
            let z: f64 = rng.sample(StandardNormal);
            let xi = z.abs().min(1.0);
            let hit = rng.random::<f64>() < cfg.mu;
            f[idx] = 1.0 + cfg.gamma * xi * if hit { 1.0 } else { 0.0 };
        }
    }
    f
}

/// Perturb one real plane in place; returns the largest discarded imaginary part.
pub fn perturb_plane(plane: &mut [f64], factors: &[f64], fft: &Fft2) -> f64 {
    let n = plane.len();
    let mean = plane.iter().sum::<f64>() / n as f64;
    let mut z: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    fft.forward(&mut z);
    z.iter_mut().zip(factors).for_each(|(v, &f)| *v *= f);
    fft.inverse(&mut z);
    let mut max_imag: f64 = 0.0;
    for (dst, v) in plane.iter_mut().zip(&z) {
        *dst = v.re + mean;
        max_imag = max_imag.max(v.im.abs());
    }
    max_imag
}

/// Perturbed copy of `u` and the largest imaginary residual of any inverse transform.
pub fn amplitude_perturb_detailed<R: Rng + ?Sized>(u: &CsiTensor, cfg: &PerturbConfig, rng: &mut R) -> Result<(CsiTensor, f64)> {
    cfg.validate()?;
    let mut out = u.clone();
    if !cfg.enabled {
        return Ok((out, 0.0));
    }
    let (h, w) = (u.n_y(), u.n_x());
    let fft = Fft2::new(h, w);
    let mut residual: f64 = 0.0;
    let data = out
        .data
        .as_slice_mut()
        .ok_or_else(|| Error::Shape("tensor is not contiguous".into()))?;
    for plane in data.chunks_mut(h * w) {
        let factors = factor_field(h, w, cfg, rng);
        residual = residual.max(perturb_plane(plane, &factors, &fft));
    }
    Ok((out, residual))
}

pub fn amplitude_perturb<R: Rng + ?Sized>(u: &CsiTensor, cfg: &PerturbConfig, rng: &mut R) -> Result<CsiTensor> {
    Ok(amplitude_perturb_detailed(u, cfg, rng)?.0)
}
