//! Convolutions, normalization, activations and resampling.

use ndarray::{Array2, Array3, Zip};
use rand::Rng;

use super::{gemm, join, Float, Module, Param};
use crate::error::{Error, Result};

/// Output length of a strided, padded window sweep.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k == 0 || stride == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Unfold `x` into a `(C·k·k) × (Ho·Wo)` column matrix (zero padding).
pub fn im2col<T: Float>(x: &Array3<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back to a `(C, H, W)` map.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<T> {
    let mut out = Array3::<T>::zeros((c, h, w));
    let os = out.as_slice_mut().unwrap();
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            os[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dense 2D convolution, weight `(C_out, C_in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    /// Unfolded input; for 1×1/stride-1 this is the input itself.
    cols: Vec<T>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Float> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::trunc_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// "same" padding at stride 1.
    pub fn same<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Self::new(in_channels, out_channels, kernel, stride, kernel / 2, rng)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (
            conv_out_len(h, self.kernel, self.stride, self.pad),
            conv_out_len(w, self.kernel, self.stride, self.pad),
        ) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Shape(format!(
                "kernel {} larger than padded input {h}x{w}",
                self.kernel
            ))),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<(Array3<T>, Conv2dCache<T>)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let cols = if self.is_pointwise() {
            x.as_slice().unwrap().to_vec()
        } else {
            im2col(x, self.kernel, self.stride, self.pad, ho, wo)
        };
        let out = self.apply_cols(&cols, ho, wo);
        Ok((
            out,
            Conv2dCache {
                cols,
                in_dim: (c, h, w),
                out_hw: (ho, wo),
            },
        ))
    }

    /// `W · cols + b` on an already unfolded input.
    pub fn apply_cols(&self, cols: &[T], ho: usize, wo: usize) -> Array3<T> {
        let p = ho * wo;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = vec![T::zero(); self.out_channels * p];
        for (o, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        gemm(self.out_channels, kk, p, &self.weight.value, false, cols, false, &mut out, true);
        Array3::from_shape_vec((self.out_channels, ho, wo), out).unwrap()
    }

    /// Accumulate parameter gradients; returns the gradient w.r.t. the unfolded input.
    pub fn backward_cols(&mut self, cols: &[T], dy: &[T], p: usize) -> Vec<T> {
        let kk = self.in_channels * self.kernel * self.kernel;
        gemm(self.out_channels, p, kk, dy, false, cols, true, &mut self.weight.grad, true);
        for (o, row) in dy.chunks(p).enumerate() {
            self.bias.grad[o] += row.iter().copied().sum::<T>();
        }
        let mut dcols = vec![T::zero(); kk * p];
        gemm(kk, self.out_channels, p, &self.weight.value, true, dy, false, &mut dcols, false);
        dcols
    }

    pub fn backward(&mut self, cache: &Conv2dCache<T>, dy: &Array3<T>) -> Array3<T> {
        let (ho, wo) = cache.out_hw;
        let (c, h, w) = cache.in_dim;
        let dcols = self.backward_cols(&cache.cols, dy.as_slice().unwrap(), ho * wo);
        if self.is_pointwise() {
            Array3::from_shape_vec((c, h, w), dcols).unwrap()
        } else {
            col2im(&dcols, c, h, w, self.kernel, self.stride, self.pad, ho, wo)
        }
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel k×k convolution, stride 1, "same" padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub channels: usize,
    pub kernel: usize,
}

impl<T: Float> DepthwiseConv2d<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::trunc_normal(&[channels, 1, kernel, kernel], kernel * kernel, rng),
            bias: Param::zeros(&[channels]),
            channels,
            kernel,
        }
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut out = Array3::<T>::zeros((c, h, w));
        let xs = x.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for ci in 0..c {
            let wk = &self.weight.value[ci * k * k..(ci + 1) * k * k];
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            let dst = &mut os[ci * h * w..(ci + 1) * h * w];
            dst.iter_mut().for_each(|v| *v = self.bias.value[ci]);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let (x0, x1) = valid_range(w, dx);
                        if x0 == x1 {
                            continue;
                        }
                        let row = iy as usize * w;
                        let src = &plane[(row as isize + x0 as isize + dx) as usize..(row as isize + x1 as isize + dx) as usize];
                        for (d, &v) in dst[y * w + x0..y * w + x1].iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut dx = Array3::<T>::zeros((c, h, w));
        let xs = x.as_slice().unwrap();
        let gs = dy.as_slice().unwrap();
        let dxs = dx.as_slice_mut().unwrap();
        for ci in 0..c {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            let gplane = &gs[ci * h * w..(ci + 1) * h * w];
            self.bias.grad[ci] += gplane.iter().copied().sum::<T>();
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ci * k * k + ky * k + kx;
                    let wv = self.weight.value[widx];
                    let ddy = ky as isize - pad;
                    let ddx = kx as isize - pad;
                    let mut acc = T::zero();
                    for y in 0..h {
                        let iy = y as isize + ddy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let (x0, x1) = valid_range(w, ddx);
                        if x0 == x1 {
                            continue;
                        }
                        let lo = (iy * w as isize + x0 as isize + ddx) as usize;
                        let n = x1 - x0;
                        let g = &gplane[y * w + x0..y * w + x1];
                        let src = &plane[lo..lo + n];
                        let dst = &mut dxs[ci * h * w + lo..ci * h * w + lo + n];
                        for ((d, &gv), &sv) in dst.iter_mut().zip(g).zip(src) {
                            acc += gv * sv;
                            *d += wv * gv;
                        }
                    }
                    self.weight.grad[widx] += acc;
                }
            }
        }
        dx
    }
}

/// Output columns `x` for which `x + d` lies in `[0, w)`.
#[inline]
fn valid_range(w: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (w as isize - d).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

impl<T: Float> Module<T> for DepthwiseConv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Layer normalization across channels at every spatial position.
#[derive(Debug, Clone)]
pub struct ChannelLayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array3<T>,
    inv_std: Vec<T>,
}

impl<T: Float> ChannelLayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::filled(&[channels], T::one()),
            bias: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, LayerNormCache<T>) {
        let (c, h, w) = x.dim();
        let p = h * w;
        let xs = x.as_slice().unwrap();
        let cf = T::c(c as f64);
        let mut mean = vec![T::zero(); p];
        let mut var = vec![T::zero(); p];
        for ci in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xs[ci * p..(ci + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= cf);
        for ci in 0..c {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(&xs[ci * p..(ci + 1) * p]) {
                *s += (v - m) * (v - m);
            }
        }
        let eps = T::c(LAYER_NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / cf + eps).sqrt()).collect();
        let mut xhat = Array3::<T>::zeros((c, h, w));
        let mut out = Array3::<T>::zeros((c, h, w));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let os = out.as_slice_mut().unwrap();
            for ci in 0..c {
                let (g, b) = (self.weight.value[ci], self.bias.value[ci]);
                for i in 0..p {
                    let v = (xs[ci * p + i] - mean[i]) * inv_std[i];
                    xh[ci * p + i] = v;
                    os[ci * p + i] = g * v + b;
                }
            }
        }
        (out, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Array3<T>) -> Array3<T> {
        let (c, h, w) = dy.dim();
        let p = h * w;
        let xh = cache.xhat.as_slice().unwrap();
        let gs = dy.as_slice().unwrap();
        let cf = T::c(c as f64);
        let mut sum_g = vec![T::zero(); p];
        let mut sum_gx = vec![T::zero(); p];
        for ci in 0..c {
            let gamma = self.weight.value[ci];
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..p {
                let g = gs[ci * p + i];
                dg += g * xh[ci * p + i];
                db += g;
                let gh = g * gamma;
                sum_g[i] += gh;
                sum_gx[i] += gh * xh[ci * p + i];
            }
            self.weight.grad[ci] += dg;
            self.bias.grad[ci] += db;
        }
        let mut dx = Array3::<T>::zeros((c, h, w));
        let ds = dx.as_slice_mut().unwrap();
        for ci in 0..c {
            let gamma = self.weight.value[ci];
            for i in 0..p {
                let gh = gs[ci * p + i] * gamma;
                ds[ci * p + i] =
                    cache.inv_std[i] * (gh - sum_g[i] / cf - xh[ci * p + i] * sum_gx[i] / cf);
            }
        }
        dx
    }
}

impl<T: Float> Module<T> for ChannelLayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<T: Float>(x: &Array3<T>) -> Array3<T> {
    let s = T::c(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { v * s })
}

pub fn leaky_relu_backward<T: Float>(x: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let s = T::c(LEAKY_SLOPE);
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= T::zero() {
            *d *= s;
        }
    });
    dx
}

#[inline]
pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<T: Float>(v: T) -> T {
    let x = v.to_f64();
    T::c(0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)))
}

#[inline]
pub fn gelu_grad<T: Float>(v: T) -> T {
    let x = v.to_f64();
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::c(cdf + x * pdf)
}

/// One axis of bilinear interpolation with half-pixel centers (no corner alignment).
#[derive(Debug, Clone)]
struct Axis {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Axis {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of every channel to `(out_h, out_w)`.
pub fn bilinear_resize<T: Float>(x: &Array3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    let ay = Axis::new(h, out_h);
    let ax = Axis::new(w, out_w);
    let mut out = Array3::<T>::zeros((c, out_h, out_w));
    for ci in 0..c {
        for oy in 0..out_h {
            let fy = T::c(ay.frac[oy]);
            for ox in 0..out_w {
                let fx = T::c(ax.frac[ox]);
                let (y0, y1, x0, x1) = (ay.lo[oy], ay.hi[oy], ax.lo[ox], ax.hi[ox]);
                let top = x[[ci, y0, x0]] * (T::one() - fx) + x[[ci, y0, x1]] * fx;
                let bot = x[[ci, y1, x0]] * (T::one() - fx) + x[[ci, y1, x1]] * fx;
                out[[ci, oy, ox]] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward<T: Float>(dy: &Array3<T>, in_h: usize, in_w: usize) -> Array3<T> {
    let (c, out_h, out_w) = dy.dim();
    let ay = Axis::new(in_h, out_h);
    let ax = Axis::new(in_w, out_w);
    let mut dx = Array3::<T>::zeros((c, in_h, in_w));
    for ci in 0..c {
        for oy in 0..out_h {
            let fy = T::c(ay.frac[oy]);
            for ox in 0..out_w {
                let fx = T::c(ax.frac[ox]);
                let g = dy[[ci, oy, ox]];
                let (y0, y1, x0, x1) = (ay.lo[oy], ay.hi[oy], ax.lo[ox], ax.hi[ox]);
                dx[[ci, y0, x0]] += g * (T::one() - fy) * (T::one() - fx);
                dx[[ci, y0, x1]] += g * (T::one() - fy) * fx;
                dx[[ci, y1, x0]] += g * fy * (T::one() - fx);
                dx[[ci, y1, x1]] += g * fy * fx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize of a flag map (`src = floor(dst · in / out)`).
pub fn nearest_resize_flags(flags: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = flags.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        flags[[(y * h) / out_h, (x * w) / out_w]]
    })
}

/// Inverted dropout. Returns the scaled keep-mask (zeros where dropped).
pub fn dropout_mask<T: Float, R: Rng + ?Sized>(dim: (usize, usize, usize), rate: f64, rng: &mut R) -> Array3<T> {
    let keep = T::c(1.0 / (1.0 - rate));
    Array3::from_shape_simple_fn(dim, || {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng))
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(x: &Array3<f64>, conv: &Conv2d<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = conv.output_hw(h, w).unwrap();
        let k = conv.kernel;
        Array3::from_shape_fn((conv.out_channels, ho, wo), |(o, oy, ox)| {
            let mut acc = conv.bias.value[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight.value[((o * c + ci) * k + ky) * k + kx]
                                * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, s) in [(3, 1), (3, 2), (5, 1), (1, 1)] {
            let mut conv = Conv2d::<f64>::same(3, 4, k, s, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = randn((3, 7, 6), 1);
            let (y, _) = conv.forward(&x).unwrap();
            let y_ref = conv_oracle(&x, &conv);
            assert_eq!(y.dim(), y_ref.dim());
            assert!((&y - &y_ref).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s) in [(3, 2), (1, 1)] {
            let mut conv = Conv2d::<f64>::same(3, 2, k, s, &mut rng);
            let x = randn((3, 5, 4), 2);
            let (y, cache) = conv.forward(&x).unwrap();
            let w = randn(y.dim(), 3);
            let dx = conv.backward(&cache, &w);
            let c2 = conv.clone();
            assert!(gradcheck::check_input(&x, &w, &dx, |xp| c2.forward(xp).unwrap().0) < 1e-6);
            let x2 = x.clone();
            let w2 = w.clone();
            assert!(gradcheck::check_params(&mut conv, |m| (&m.forward(&x2).unwrap().0 * &w2).sum()) < 1e-6);
        }
    }

    #[test]
    fn conv_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(2, 2, 5, 1, 0, &mut rng);
        assert!(conv.forward(&randn((3, 8, 8), 0)).is_err());
        assert!(conv.forward(&randn((2, 3, 3), 0)).is_err());
    }

    #[test]
    fn depthwise_gradients_and_oracle() {
        // includes maps narrower than the kernel radius
        for (i, &(h, w)) in [(6, 5), (2, 2), (1, 4)].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(5 + i as u64);
            let mut dw = DepthwiseConv2d::<f64>::new(3, 7, &mut rng);
            dw.bias.value = vec![0.5, 0.0, -0.5];
            let x = randn((3, h, w), 6);
            let y = dw.forward(&x);
            // oracle: dense conv whose weight is block-diagonal
            let mut dense = Conv2d::<f64>::same(3, 3, 7, 1, &mut rng);
            dense.weight.value.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..3 {
                for t in 0..49 {
                    dense.weight.value[(c * 3 + c) * 49 + t] = dw.weight.value[c * 49 + t];
                }
            }
            dense.bias.value = dw.bias.value.clone();
            let y_ref = conv_oracle(&x, &dense);
            assert!((&y - &y_ref).iter().all(|d| d.abs() < 1e-12));

            let g = randn(y.dim(), 7);
            let dx = dw.backward(&x, &g);
            let d2 = dw.clone();
            assert!(gradcheck::check_input(&x, &g, &dx, |xp| d2.forward(xp)) < 1e-6);
            assert!(gradcheck::check_params(&mut dw, |m| (&m.forward(&x) * &g).sum()) < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut ln = ChannelLayerNorm::<f64>::new(4);
        ln.weight.value = vec![1.0, 0.5, -1.0, 2.0];
        ln.bias.value = vec![0.0, 0.1, 0.2, 0.3];
        let x = randn((4, 3, 3), 8);
        let (y, cache) = ln.forward(&x);
        let w = randn(y.dim(), 9);
        let dx = ln.backward(&cache, &w);
        let l2 = ln.clone();
        assert!(gradcheck::check_input(&x, &w, &dx, |xp| l2.forward(xp).0) < 1e-5);
        assert!(gradcheck::check_params(&mut ln, |m| (&m.forward(&x).0 * &w).sum()) < 1e-6);
    }

    #[test]
    fn gelu_derivative() {
        for &v in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let num = (gelu(v + 1e-6) - gelu(v - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(v)).abs() < 1e-8);
        }
        assert!((gelu(1.0f64) - 0.841_344_746).abs() < 1e-8);
    }

    #[test]
    fn bilinear_constant_and_shape() {
        let x = Array3::from_elem((256, 16, 8), 3.25f64);
        let y = bilinear_resize(&x, 32, 16);
        assert_eq!(y.dim(), (256, 32, 16));
        assert!(y.iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn bilinear_preserves_ramp_in_interior() {
        // f(x) = 2x + 1 sampled at input pixel centers; output pixel centers
        // sit at input coordinate (o + 0.5)/2 - 0.5.
        let x = Array3::from_shape_fn((1, 4, 8), |(_, _, c)| 2.0 * c as f64 + 1.0);
        let y = bilinear_resize(&x, 8, 16);
        for ox in 1..15 {
            let src = (ox as f64 + 0.5) / 2.0 - 0.5;
            assert!((y[[0, 3, ox]] - (2.0 * src + 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_downsample_averages_blocks() {
        let x = randn((2, 4, 6), 11);
        let y = bilinear_resize(&x, 2, 3);
        let avg = (x[[1, 2, 4]] + x[[1, 2, 5]] + x[[1, 3, 4]] + x[[1, 3, 5]]) / 4.0;
        assert!((y[[1, 1, 2]] - avg).abs() < 1e-12);
    }

    #[test]
    fn bilinear_adjoint() {
        // <R x, y> = <x, Rᵀ y>
        let x = randn((2, 4, 3), 12);
        let y = randn((2, 8, 6), 13);
        let lhs = (&bilinear_resize(&x, 8, 6) * &y).sum();
        let rhs = (&x * &bilinear_resize_backward(&y, 4, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let xd = randn((2, 8, 6), 14);
        let yd = randn((2, 4, 3), 15);
        let lhs = (&bilinear_resize(&xd, 4, 3) * &yd).sum();
        let rhs = (&xd * &bilinear_resize_backward(&yd, 8, 6)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn nearest_flags() {
        let f = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as u8);
        let d = nearest_resize_flags(&f, 2, 2);
        assert_eq!(d, Array2::from_shape_fn((2, 2), |(y, x)| f[[2 * y, 2 * x]]));
    }

    #[test]
    fn leaky_backward_matches() {
        let x = randn((2, 3, 3), 4);
        let w = randn((2, 3, 3), 5);
        let dx = leaky_relu_backward(&x, &w);
        assert!(gradcheck::check_input(&x, &w, &dx, leaky_relu) < 1e-6);
    }
}
