//! Fluid-antenna spatial correlation and synthetic channel draws.
//!
//! Ports are flattened row-major over `(n_y, n_x)`: port `(y, x)` has flat
//! index `y * n_x + x`. Every tensor layout downstream uses the same order.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Below this magnitude `sin(x)/x` is replaced by its Taylor polynomial.
const SINC_TAYLOR_EPS: f64 = 1e-4;

/// Eigenvalues in `[-PSD_TOL, 0)` are treated as roundoff and clipped.
pub const PSD_TOL: f64 = 1e-8;

/// Geometry of the planar port lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortGrid {
    pub n_x: usize,
    pub n_y: usize,
    /// Aperture along x, meters.
    pub w_x: f64,
    /// Aperture along y, meters.
    pub w_y: f64,
    /// Carrier wavelength, meters.
    pub wavelength: f64,
}

impl PortGrid {
    pub fn new(n_x: usize, n_y: usize, w_x: f64, w_y: f64, wavelength: f64) -> Result<Self> {
        let grid = Self {
            n_x,
            n_y,
            w_x,
            w_y,
            wavelength,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with the wavelength derived from a carrier frequency in GHz.
    pub fn from_frequency(n_x: usize, n_y: usize, w_x: f64, w_y: f64, freq_ghz: f64) -> Result<Self> {
        if !(freq_ghz.is_finite() && freq_ghz > 0.0) {
            return Err(Error::InvalidGrid(format!("carrier frequency {freq_ghz} GHz")));
        }
        Self::new(n_x, n_y, w_x, w_y, wavelength_from_ghz(freq_ghz))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 2 || self.n_y < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 ports per axis, got {}x{} (n_y x n_x)",
                self.n_y, self.n_x
            )));
        }
        for (name, v) in [("w_x", self.w_x), ("w_y", self.w_y), ("wavelength", self.wavelength)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidGrid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn n_ports(&self) -> usize {
        self.n_x * self.n_y
    }

    #[inline]
    pub fn flat_index(&self, y: usize, x: usize) -> usize {
        y * self.n_x + x
    }

    #[inline]
    pub fn coords(&self, port: usize) -> (usize, usize) {
        (port / self.n_x, port % self.n_x)
    }

    /// Port spacing along x and y.
    pub fn spacing(&self) -> (f64, f64) {
        (
            self.w_x / (self.n_x - 1) as f64,
            self.w_y / (self.n_y - 1) as f64,
        )
    }
}

pub fn wavelength_from_ghz(freq_ghz: f64) -> f64 {
    SPEED_OF_LIGHT / (freq_ghz * 1e9)
}

/// Zeroth-order spherical Bessel function of the first kind, `sin(x)/x`.
pub fn sinc_j0(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("sinc_j0 of non-finite argument {x}")));
    }
    if x.abs() < SINC_TAYLOR_EPS {
        let x2 = x * x;
        Ok(1.0 - x2 / 6.0 + x2 * x2 / 120.0)
    } else {
        Ok(x.sin() / x)
    }
}

/// Correlation matrix and, once [`eigendecompose`] has run, its spectrum.
#[derive(Debug, Clone)]
pub struct CorrelationModel {
    pub grid: PortGrid,
    pub j_matrix: DMatrix<f64>,
    /// Columns are eigenvectors, ordered like `eigvals`.
    pub eigvecs: Option<DMatrix<f64>>,
    /// Descending, clipped at zero.
    pub eigvals: Option<Vec<f64>>,
    /// `U * sqrt(diag(eigvals))`, cached for sampling.
    coloring: Option<DMatrix<f64>>,
}

/// Build the port correlation matrix from the rich-scattering model.
pub fn build_correlation(grid: &PortGrid) -> Result<CorrelationModel> {
    grid.validate()?;
    let n = grid.n_ports();
    let (dx, dy) = grid.spacing();
    let k = 2.0 * std::f64::consts::PI / grid.wavelength;

    // Entries depend only on |Δx|, |Δy|; tabulate once.
    let mut table = vec![0.0; grid.n_y * grid.n_x];
    for ay in 0..grid.n_y {
        for ax in 0..grid.n_x {
            let dist = ((ax as f64 * dx).powi(2) + (ay as f64 * dy).powi(2)).sqrt();
            table[ay * grid.n_x + ax] = sinc_j0(k * dist)?;
        }
    }

    let mut j = DMatrix::<f64>::zeros(n, n);
    for p in 0..n {
        let (py, px) = grid.coords(p);
        j[(p, p)] = 1.0;
        for q in (p + 1)..n {
            let (qy, qx) = grid.coords(q);
            let v = table[py.abs_diff(qy) * grid.n_x + px.abs_diff(qx)];
            j[(p, q)] = v;
            j[(q, p)] = v;
        }
    }

    Ok(CorrelationModel {
        grid: *grid,
        j_matrix: j,
        eigvecs: None,
        eigvals: None,
        coloring: None,
    })
}

/// Symmetric eigendecomposition with descending eigenvalues and roundoff clipping.
pub fn eigendecompose(mut corr: CorrelationModel) -> Result<CorrelationModel> {
    let n = corr.j_matrix.nrows();
    let eig = SymmetricEigen::new(corr.j_matrix.clone());

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let worst = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if worst < -PSD_TOL {
        return Err(Error::NotPsd { worst });
    }

    let eigvals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut eigvecs = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigvecs.set_column(dst, &eig.eigenvectors.column(src));
    }

    let mut coloring = eigvecs.clone();
    for (c, &lam) in eigvals.iter().enumerate() {
        let s = lam.sqrt();
        coloring.column_mut(c).iter_mut().for_each(|v| *v *= s);
    }

    corr.eigvecs = Some(eigvecs);
    corr.eigvals = Some(eigvals);
    corr.coloring = Some(coloring);
    Ok(corr)
}

impl CorrelationModel {
    /// Convenience: build and decompose in one go.
    pub fn for_grid(grid: &PortGrid) -> Result<Self> {
        eigendecompose(build_correlation(grid)?)
    }

    /// Model with a caller-supplied correlation matrix (tests, hypothetical spectra).
    pub fn from_matrix(grid: PortGrid, j_matrix: DMatrix<f64>) -> Result<Self> {
        if j_matrix.nrows() != grid.n_ports() || j_matrix.ncols() != grid.n_ports() {
            return Err(Error::Shape(format!(
                "correlation matrix is {}x{}, grid has {} ports",
                j_matrix.nrows(),
                j_matrix.ncols(),
                grid.n_ports()
            )));
        }
        Ok(Self {
            grid,
            j_matrix,
            eigvecs: None,
            eigvals: None,
            coloring: None,
        })
    }

    /// Max-entry error of `U diag(Λ) Uᵀ` against `J`.
    pub fn reconstruction_error(&self) -> Option<f64> {
        let u = self.eigvecs.as_ref()?;
        let lam = self.eigvals.as_ref()?;
        let mut scaled = u.clone();
        for (c, &l) in lam.iter().enumerate() {
            scaled.column_mut(c).iter_mut().for_each(|v| *v *= l);
        }
        let rec = scaled * u.transpose();
        Some((rec - &self.j_matrix).amax())
    }

    pub fn coloring(&self) -> Option<&DMatrix<f64>> {
        self.coloring.as_ref()
    }
}

/// One user's channel: `n_ports x m_t` complex gains, row-major by port.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub n_ports: usize,
    pub m_t: usize,
    pub g_clean: Vec<Complex64>,
    pub g_noisy: Option<Vec<Complex64>>,
    /// `+inf` means no noise has been added.
    pub snr_db: f64,
    pub delta: f64,
    pub seed: u64,
}

impl ChannelSample {
    pub fn from_clean(g_clean: Vec<Complex64>, n_ports: usize, m_t: usize, delta: f64, seed: u64) -> Result<Self> {
        if g_clean.len() != n_ports * m_t {
            return Err(Error::Shape(format!(
                "channel has {} entries, expected {} x {}",
                g_clean.len(),
                n_ports,
                m_t
            )));
        }
        Ok(Self {
            n_ports,
            m_t,
            g_clean,
            g_noisy: None,
            snr_db: f64::INFINITY,
            delta,
            seed,
        })
    }

    #[inline]
    pub fn clean(&self, port: usize, antenna: usize) -> Complex64 {
        self.g_clean[port * self.m_t + antenna]
    }

    /// Noisy channel if noise was applied, otherwise the clean one.
    pub fn noisy_or_clean(&self) -> &[Complex64] {
        self.g_noisy.as_deref().unwrap_or(&self.g_clean)
    }
}

/// Draw `g = δ U sqrt(Λ) G` with `G` standard circular complex Gaussian.
pub fn sample_channel<R: Rng + ?Sized>(
    corr: &CorrelationModel,
    m_t: usize,
    delta: f64,
    seed: u64,
    rng: &mut R,
) -> Result<ChannelSample> {
    if m_t < 1 {
        return Err(Error::InvalidArgument("m_t must be at least 1".into()));
    }
    let coloring = corr
        .coloring()
        .ok_or_else(|| Error::InvalidArgument("correlation model has no eigendecomposition".into()))?;
    let n = corr.grid.n_ports();

    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut g_re = DMatrix::<f64>::zeros(n, m_t);
    let mut g_im = DMatrix::<f64>::zeros(n, m_t);
    for r in 0..n {
        for c in 0..m_t {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            g_re[(r, c)] = re * half;
            g_im[(r, c)] = im * half;
        }
    }
    let h_re = coloring * g_re;
    let h_im = coloring * g_im;

    let mut g = Vec::with_capacity(n * m_t);
    for p in 0..n {
        for a in 0..m_t {
            g.push(Complex64::new(delta * h_re[(p, a)], delta * h_im[(p, a)]));
        }
    }
    ChannelSample::from_clean(g, n, m_t, delta, seed)
}

/// Per-entry noise variance for a given SNR: `δ² · 10^(−snr/10)`.
pub fn noise_variance(delta: f64, snr_db: f64) -> f64 {
    delta * delta * 10f64.powf(-snr_db / 10.0)
}

/// Add circular complex white Gaussian noise at `snr_db`. `+inf` leaves the channel clean.
pub fn apply_awgn<R: Rng + ?Sized>(mut sample: ChannelSample, snr_db: f64, rng: &mut R) -> Result<ChannelSample> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(format!("snr_db = {snr_db}")));
    }
    sample.snr_db = snr_db;
    if snr_db == f64::INFINITY {
        sample.g_noisy = Some(sample.g_clean.clone());
        return Ok(sample);
    }
    let sigma = (noise_variance(sample.delta, snr_db) / 2.0).sqrt();
    let noisy = sample
        .g_clean
        .iter()
        .map(|&g| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            g + Complex64::new(sigma * re, sigma * im)
        })
        .collect();
    sample.g_noisy = Some(noisy);
    Ok(sample)
}
