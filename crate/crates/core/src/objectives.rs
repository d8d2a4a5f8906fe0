//! Training losses and the NMSE metric.
//!
//! Tensors are `(2·M_t, N_y, N_x)` with real parts in the first `M_t`
//! channels and imaginary parts in the rest.

use ndarray::Array3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;

/// Reported NMSE for a perfect reconstruction.
pub const NMSE_DB_FLOOR: f64 = -100.0;

fn check_shapes(u_hat: &Array3<f64>, u_true: &Array3<f64>) -> Result<()> {
    if u_hat.dim() != u_true.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            u_hat.dim(),
            u_true.dim()
        )));
    }
    Ok(())
}

/// Mean over masked positions of the squared channel-vector error.
pub fn masked_mse(u_hat: &Array3<f64>, u_true: &Array3<f64>, omega: &[(usize, usize)]) -> Result<f64> {
    masked_mse_impl(u_hat, u_true, omega, None)
}

/// As [`masked_mse`], also returning `∂L/∂u_hat`.
pub fn masked_mse_grad(u_hat: &Array3<f64>, u_true: &Array3<f64>, omega: &[(usize, usize)]) -> Result<(f64, Array3<f64>)> {
    let mut g = Array3::zeros(u_hat.dim());
    let l = masked_mse_impl(u_hat, u_true, omega, Some(&mut g))?;
    Ok((l, g))
}

fn masked_mse_impl(
    u_hat: &Array3<f64>,
    u_true: &Array3<f64>,
    omega: &[(usize, usize)],
    mut grad: Option<&mut Array3<f64>>,
) -> Result<f64> {
    check_shapes(u_hat, u_true)?;
    if omega.is_empty() {
        return Err(Error::UndefinedLoss("masked MSE over an empty masked set".into()));
    }
    let c = u_hat.dim().0;
    let inv = 1.0 / omega.len() as f64;
    let mut acc = 0.0;
    for &(y, x) in omega {
        for ch in 0..c {
            let d = u_hat[[ch, y, x]] - u_true[[ch, y, x]];
            acc += d * d;
            if let Some(g) = grad.as_deref_mut() {
                g[[ch, y, x]] = 2.0 * d * inv;
            }
        }
    }
    Ok(acc * inv)
}

fn complex_planes(u: &Array3<f64>) -> Result<Vec<Vec<Complex64>>> {
    let (c, h, w) = u.dim();
    if c % 2 != 0 {
        return Err(Error::Shape(format!("{c} channels cannot pair into real/imaginary planes")));
    }
    let m_t = c / 2;
    Ok((0..m_t)
        .map(|a| {
            (0..h * w)
                .map(|i| Complex64::new(u[[a, i / w, i % w]], u[[a + m_t, i / w, i % w]]))
                .collect()
        })
        .collect())
}

/// Mean squared difference of 2D amplitude spectra over bins and planes.
pub fn fft_amplitude_loss(u_hat: &Array3<f64>, u_true: &Array3<f64>) -> Result<f64> {
    Ok(fft_loss_impl(u_hat, u_true, false)?.0)
}

pub fn fft_amplitude_loss_grad(u_hat: &Array3<f64>, u_true: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    let (l, g) = fft_loss_impl(u_hat, u_true, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn fft_loss_impl(u_hat: &Array3<f64>, u_true: &Array3<f64>, want_grad: bool) -> Result<(f64, Option<Array3<f64>>)> {
    check_shapes(u_hat, u_true)?;
    let (c, h, w) = u_hat.dim();
    let planes_hat = complex_planes(u_hat)?;
    let planes_true = complex_planes(u_true)?;
    let m_t = c / 2;
    let fft = Fft2::new(h, w);
    let n = (m_t * h * w) as f64;
    let mut grad = want_grad.then(|| Array3::zeros((c, h, w)));
    let mut acc = 0.0;
    for (a, (mut fh, mut ft)) in planes_hat.into_iter().zip(planes_true).enumerate() {
        fft.forward(&mut fh);
        fft.forward(&mut ft);
        let mut back = Vec::with_capacity(h * w);
        for (zh, zt) in fh.iter().zip(&ft) {
            let (ah, at) = (zh.norm(), zt.norm());
            let r = ah - at;
            acc += r * r;
            // d/d(Re, Im) of r² is 2r·z/|z|; zero at |z| = 0
            back.push(if ah > 0.0 { zh * (2.0 * r / (ah * n)) } else { Complex64::default() });
        }
        if let Some(g) = grad.as_mut() {
            fft.inverse_unnormalized(&mut back);
            for (i, v) in back.iter().enumerate() {
                g[[a, i / w, i % w]] = v.re;
                g[[a + m_t, i / w, i % w]] = v.im;
            }
        }
    }
    Ok((acc / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub fft: f64,
    pub total: f64,
    pub beta: f64,
}

pub fn total_loss(u_hat: &Array3<f64>, u_true: &Array3<f64>, omega: &[(usize, usize)], beta: f64) -> Result<LossBreakdown> {
    let mse = masked_mse(u_hat, u_true, omega)?;
    let fft = if beta != 0.0 { fft_amplitude_loss(u_hat, u_true)? } else { 0.0 };
    Ok(LossBreakdown {
        mse,
        fft,
        total: mse + beta * fft,
        beta,
    })
}

/// Loss and its gradient w.r.t. `u_hat`. The FFT term is skipped when `beta` is zero.
pub fn total_loss_grad(
    u_hat: &Array3<f64>,
    u_true: &Array3<f64>,
    omega: &[(usize, usize)],
    beta: f64,
) -> Result<(LossBreakdown, Array3<f64>)> {
    let (mse, mut g) = masked_mse_grad(u_hat, u_true, omega)?;
    let mut fft = 0.0;
    if beta != 0.0 {
        let (l, gf) = fft_amplitude_loss_grad(u_hat, u_true)?;
        fft = l;
        g.scaled_add(beta, &gf);
    }
    Ok((
        LossBreakdown {
            mse,
            fft,
            total: mse + beta * fft,
            beta,
        },
        g,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub linear: f64,
    pub db: f64,
}

pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        NMSE_DB_FLOOR
    } else {
        (10.0 * linear.log10()).max(NMSE_DB_FLOOR)
    }
}

/// Running `Σ‖g − ĝ‖²` and `Σ‖g‖²`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmseAccumulator {
    pub error: f64,
    pub power: f64,
}

impl NmseAccumulator {
    pub fn add<'a>(&mut self, g_hat: impl IntoIterator<Item = &'a f64>, g: impl IntoIterator<Item = &'a f64>) {
        for (a, b) in g_hat.into_iter().zip(g) {
            self.error += (b - a) * (b - a);
            self.power += b * b;
        }
    }

    pub fn add_complex(&mut self, g_hat: &[Complex64], g: &[Complex64]) {
        for (a, b) in g_hat.iter().zip(g) {
            self.error += (b - a).norm_sqr();
            self.power += b.norm_sqr();
        }
    }

    pub fn finish(&self) -> Result<Nmse> {
        if !(self.power > 0.0) {
            return Err(Error::UndefinedLoss("NMSE with zero target power".into()));
        }
        let linear = self.error / self.power;
        Ok(Nmse { linear, db: to_db(linear) })
    }
}

/// `Σ‖g_n − ĝ_n‖² / Σ‖g_n‖²` over a set of complex matrices.
pub fn nmse<A: AsRef<[Complex64]>, B: AsRef<[Complex64]>>(g_hat: &[A], g: &[B]) -> Result<Nmse> {
    if g_hat.len() != g.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", g_hat.len(), g.len())));
    }
    let mut acc = NmseAccumulator::default();
    for (a, b) in g_hat.iter().zip(g) {
        let (a, b) = (a.as_ref(), b.as_ref());
        if a.len() != b.len() {
            return Err(Error::Shape(format!("matrix of {} entries against {}", a.len(), b.len())));
        }
        acc.add_complex(a, b);
    }
    acc.finish()
}
