//! Real-valued tensor layout for CSI and random port masking.

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rand::Rng;

use crate::channel::{ChannelSample, PortGrid};
use crate::error::{Error, Result};

pub const DEFAULT_SENTINEL: f64 = -10.0;

/// CSI as `(2·m_t, n_y, n_x)`: real parts in channels `0..m_t`, imaginary
/// parts in `m_t..2·m_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiTensor {
    pub data: Array3<f64>,
    pub m_t: usize,
}

impl CsiTensor {
    pub fn zeros(m_t: usize, n_y: usize, n_x: usize) -> Self {
        Self {
            data: Array3::zeros((2 * m_t, n_y, n_x)),
            m_t,
        }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let c = data.dim().0;
        if c == 0 || !c.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "CSI tensor needs an even, nonzero channel count, got {c}"
            )));
        }
        Ok(Self { data, m_t: c / 2 })
    }

    pub fn n_y(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_x(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Clean,
    Noisy,
}

/// Lay a channel out as a CSI tensor. Port `y·n_x + x` lands at `(y, x)`.
pub fn tensorize(sample: &ChannelSample, which: Which, n_y: usize, n_x: usize) -> Result<CsiTensor> {
    let g = match which {
        Which::Clean => &sample.g_clean[..],
        Which::Noisy => sample.noisy_or_clean(),
    };
    tensorize_raw(g, sample.n_ports, sample.m_t, n_y, n_x)
}

pub fn tensorize_raw(g: &[Complex64], n_ports: usize, m_t: usize, n_y: usize, n_x: usize) -> Result<CsiTensor> {
    if n_ports != n_y * n_x || g.len() != n_ports * m_t {
        return Err(Error::Shape(format!(
            "channel with {n_ports} ports x {m_t} antennas ({} values) does not fit a {n_y}x{n_x} grid",
            g.len()
        )));
    }
    let mut data = Array3::zeros((2 * m_t, n_y, n_x));
    for y in 0..n_y {
        for x in 0..n_x {
            let base = (y * n_x + x) * m_t;
            for a in 0..m_t {
                let v = g[base + a];
                data[[a, y, x]] = v.re;
                data[[m_t + a, y, x]] = v.im;
            }
        }
    }
    Ok(CsiTensor { data, m_t })
}

/// Inverse of [`tensorize`]: back to a row-major `n_ports x m_t` complex matrix.
pub fn detensorize(u: &CsiTensor) -> Result<Vec<Complex64>> {
    let (c, n_y, n_x) = u.data.dim();
    if c != 2 * u.m_t || u.m_t == 0 {
        return Err(Error::Shape(format!(
            "tensor has {c} channels, expected 2·m_t = {}",
            2 * u.m_t
        )));
    }
    let m_t = u.m_t;
    let mut g = Vec::with_capacity(n_y * n_x * m_t);
    for y in 0..n_y {
        for x in 0..n_x {
            for a in 0..m_t {
                g.push(Complex64::new(u.data[[a, y, x]], u.data[[m_t + a, y, x]]));
            }
        }
    }
    Ok(g)
}

/// Observed/unobserved structure of one masked draw.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// 1 = observed, 0 = masked; shape `(n_y, n_x)`.
    pub e_flag: Array2<u8>,
    /// Masked `(y, x)` positions in row-major order.
    pub omega: Vec<(usize, usize)>,
    pub sentinel: f64,
}

impl MaskSpec {
    pub fn from_flags(e_flag: Array2<u8>, sentinel: f64) -> Self {
        let omega = e_flag
            .indexed_iter()
            .filter(|(_, &f)| f == 0)
            .map(|(idx, _)| idx)
            .collect();
        Self {
            e_flag,
            omega,
            sentinel,
        }
    }

    /// Everything observed.
    pub fn full(n_y: usize, n_x: usize) -> Self {
        Self::from_flags(Array2::ones((n_y, n_x)), DEFAULT_SENTINEL)
    }

    pub fn n_a(&self) -> usize {
        self.omega.len()
    }

    pub fn observed_count(&self) -> usize {
        self.e_flag.len() - self.omega.len()
    }

    pub fn is_observed(&self, y: usize, x: usize) -> bool {
        self.e_flag[[y, x]] != 0
    }
}

/// Observe exactly `observed_count` ports, chosen uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(
    grid: &PortGrid,
    observed_count: usize,
    sentinel: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    sample_mask_dims(grid.n_y, grid.n_x, observed_count, sentinel, rng)
}

pub fn sample_mask_dims<R: Rng + ?Sized>(
    n_y: usize,
    n_x: usize,
    observed_count: usize,
    sentinel: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    let n = n_y * n_x;
    if observed_count < 1 || observed_count > n {
        return Err(Error::InvalidArgument(format!(
            "observed_count {observed_count} outside [1, {n}]"
        )));
    }
    let mut flags = Array2::<u8>::zeros((n_y, n_x));
    for port in rand::seq::index::sample(rng, n, observed_count) {
        flags[[port / n_x, port % n_x]] = 1;
    }
    Ok(MaskSpec::from_flags(flags, sentinel))
}

/// Overwrite every channel at masked positions with the sentinel.
pub fn apply_mask(u: &CsiTensor, mask: &MaskSpec) -> Result<CsiTensor> {
    let (_, n_y, n_x) = u.data.dim();
    if mask.e_flag.dim() != (n_y, n_x) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match tensor grid {n_y}x{n_x}",
            mask.e_flag.dim()
        )));
    }
    let mut out = u.clone();
    for &(y, x) in &mask.omega {
        out.data.slice_mut(s![.., y, x]).fill(mask.sentinel);
    }
    Ok(out)
}

/// Network input: the masked tensor, optionally followed by the flag map as
/// one extra channel.
pub fn network_input(masked: &CsiTensor, mask: &MaskSpec, flag_channel: bool) -> Array3<f64> {
    if !flag_channel {
        return masked.data.clone();
    }
    let (c, n_y, n_x) = masked.data.dim();
    let mut out = Array3::zeros((c + 1, n_y, n_x));
    out.slice_mut(s![..c, .., ..]).assign(&masked.data);
    out.slice_mut(s![c, .., ..])
        .assign(&mask.e_flag.mapv(|f| f as f64));
    out
}
