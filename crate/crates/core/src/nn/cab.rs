//! Context adaptive block.
//!
//! A sigmoid soft mask `m` (one scalar per output position, computed by a
//! k×k convolution) blends a convolution branch with a local attention
//! branch over the same k×k window:
//!
//! ```text
//! m   = σ(Σ_i w^m x_i)
//! x^a = m · Σ_i softmax_i(⟨m w^q x_o, m w^k x_i⟩ / √d) · w^v x_i
//! x^c = Σ_i w^c_i x_i
//! o   = m · x^c + (1 − m) · x^a
//! ```
//!
//! Window positions that fall outside the map are left out of the softmax.

use ndarray::Array3;
use rand::Rng;

use super::ops::{col2im, im2col, sigmoid, Conv2d};
use super::{join, Float, Module, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Cab<T> {
    pub mask_conv: Conv2d<T>,
    pub conv: Conv2d<T>,
    pub query: Conv2d<T>,
    pub key: Conv2d<T>,
    pub value: Conv2d<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub qk_dim: usize,
}

/// Width of the query/key projection for a block with `out_channels` outputs.
pub fn default_qk_dim(out_channels: usize) -> usize {
    (out_channels / 4).max(8).min(out_channels)
}

#[derive(Debug, Clone)]
pub struct CabCache<T> {
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
    cols: Vec<T>,
    /// Input gathered at window centers, `(C_in, P)`.
    centers: Vec<T>,
    x_flat: Vec<T>,
    /// Soft mask per output position.
    pub m: Vec<T>,
    /// Convolution branch, `(C_out, Ho, Wo)`.
    pub xc: Array3<T>,
    /// Attention branch `x^a` (already scaled by `m`).
    pub xa: Array3<T>,
    /// Unscaled attention read-out `Σ a_i v_i`, position-major `(P, C_out)`.
    att: Vec<T>,
    q_t: Vec<T>,
    k_t: Vec<T>,
    v_t: Vec<T>,
    /// Window input indices and softmax weights, `offsets[o]..offsets[o+1]`.
    win_idx: Vec<usize>,
    win_off: Vec<usize>,
    weights: Vec<T>,
    dots: Vec<T>,
}

impl<T: Float> CabCache<T> {
    /// Softmax weights of output position `o`.
    pub fn attention_row(&self, o: usize) -> &[T] {
        &self.weights[self.win_off[o]..self.win_off[o + 1]]
    }

    pub fn num_positions(&self) -> usize {
        self.win_off.len() - 1
    }
}

fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl<T: Float> Cab<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        qk_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mask_conv: Conv2d::same(in_channels, 1, kernel, stride, rng),
            conv: Conv2d::same(in_channels, out_channels, kernel, stride, rng),
            query: Conv2d::new(in_channels, qk_dim, 1, 1, 0, rng),
            key: Conv2d::new(in_channels, qk_dim, 1, 1, 0, rng),
            value: Conv2d::new(in_channels, out_channels, 1, 1, 0, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            qk_dim,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.conv.output_hw(h, w)
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<(Array3<T>, CabCache<T>)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "CAB expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let p = ho * wo;
        let hw = h * w;
        let k = self.kernel;
        let s = self.stride;
        let pad = (k / 2) as isize;
        let x_flat = x.as_slice().unwrap().to_vec();

        let cols = if k == 1 && s == 1 {
            x_flat.clone()
        } else {
            im2col(x, k, s, k / 2, ho, wo)
        };
        let mask_pre = self.mask_conv.apply_cols(&cols, ho, wo);
        let m: Vec<T> = mask_pre.iter().map(|&v| sigmoid(v)).collect();
        let xc = self.conv.apply_cols(&cols, ho, wo);

        let mut centers = vec![T::zero(); c * p];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    centers[ci * p + oy * wo + ox] = x_flat[ci * hw + (oy * s) * w + ox * s];
                }
            }
        }
        let d = self.qk_dim;
        let q = self.query.apply_cols(&centers, ho, wo);
        let kmap = self.key.apply_cols(&x_flat, h, w);
        let vmap = self.value.apply_cols(&x_flat, h, w);
        let q_t = transpose(q.as_slice().unwrap(), d, p);
        let k_t = transpose(kmap.as_slice().unwrap(), d, hw);
        let v_t = transpose(vmap.as_slice().unwrap(), self.out_channels, hw);

        let inv_sqrt_d = T::one() / T::c(d as f64).sqrt();
        let co = self.out_channels;
        let mut win_idx = Vec::with_capacity(p * k * k);
        let mut win_off = Vec::with_capacity(p + 1);
        let mut weights = Vec::with_capacity(p * k * k);
        let mut dots = Vec::with_capacity(p * k * k);
        let mut att = vec![T::zero(); p * co];
        win_off.push(0);
        for oy in 0..ho {
            for ox in 0..wo {
                let o = oy * wo + ox;
                let (cy, cx) = ((oy * s) as isize, (ox * s) as isize);
                let start = win_idx.len();
                for dy in -pad..=pad {
                    for dx in -pad..=pad {
                        let (iy, ix) = (cy + dy, cx + dx);
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            win_idx.push(iy as usize * w + ix as usize);
                        }
                    }
                }
                let qo = &q_t[o * d..(o + 1) * d];
                let scale = m[o] * m[o] * inv_sqrt_d;
                let mut max = T::neg_infinity();
                for &i in &win_idx[start..] {
                    let dot: T = qo.iter().zip(&k_t[i * d..(i + 1) * d]).map(|(&a, &b)| a * b).sum();
                    dots.push(dot);
                    let sc = dot * scale;
                    max = max.max(sc);
                    weights.push(sc);
                }
                let mut z = T::zero();
                for wgt in &mut weights[start..] {
                    *wgt = (*wgt - max).exp();
                    z += *wgt;
                }
                let ao = &mut att[o * co..(o + 1) * co];
                for (j, &i) in win_idx[start..].iter().enumerate() {
                    let a = weights[start + j] / z;
                    weights[start + j] = a;
                    for (acc, &v) in ao.iter_mut().zip(&v_t[i * co..(i + 1) * co]) {
                        *acc += a * v;
                    }
                }
                win_off.push(win_idx.len());
            }
        }

        let mut xa = Array3::<T>::zeros((co, ho, wo));
        let mut out = Array3::<T>::zeros((co, ho, wo));
        {
            let xas = xa.as_slice_mut().unwrap();
            let os = out.as_slice_mut().unwrap();
            let xcs = xc.as_slice().unwrap();
            for ch in 0..co {
                for o in 0..p {
                    let a = m[o] * att[o * co + ch];
                    xas[ch * p + o] = a;
                    os[ch * p + o] = m[o] * xcs[ch * p + o] + (T::one() - m[o]) * a;
                }
            }
        }

        Ok((
            out,
            CabCache {
                in_dim: (c, h, w),
                out_hw: (ho, wo),
                cols,
                centers,
                x_flat,
                m,
                xc,
                xa,
                att,
                q_t,
                k_t,
                v_t,
                win_idx,
                win_off,
                weights,
                dots,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CabCache<T>, dout: &Array3<T>) -> Array3<T> {
        let (c, h, w) = cache.in_dim;
        let (ho, wo) = cache.out_hw;
        let p = ho * wo;
        let hw = h * w;
        let co = self.out_channels;
        let d = self.qk_dim;
        let k = self.kernel;
        let s = self.stride;
        let inv_sqrt_d = T::one() / T::c(d as f64).sqrt();
        let g = dout.as_slice().unwrap();
        let xcs = cache.xc.as_slice().unwrap();
        let xas = cache.xa.as_slice().unwrap();

        let mut dxc = vec![T::zero(); co * p];
        let mut dm = vec![T::zero(); p];
        // position-major gradient of the unscaled attention read-out
        let mut datt = vec![T::zero(); p * co];
        for ch in 0..co {
            for o in 0..p {
                let gv = g[ch * p + o];
                let mo = cache.m[o];
                dxc[ch * p + o] = mo * gv;
                let dxa = (T::one() - mo) * gv;
                dm[o] += gv * (xcs[ch * p + o] - xas[ch * p + o]);
                dm[o] += dxa * cache.att[o * co + ch];
                datt[o * co + ch] = mo * dxa;
            }
        }

        let mut dq_t = vec![T::zero(); p * d];
        let mut dk_t = vec![T::zero(); hw * d];
        let mut dv_t = vec![T::zero(); hw * co];
        let mut da = Vec::with_capacity(k * k);
        for o in 0..p {
            let (lo, hi) = (cache.win_off[o], cache.win_off[o + 1]);
            let dao = &datt[o * co..(o + 1) * co];
            da.clear();
            let mut sum = T::zero();
            for j in lo..hi {
                let i = cache.win_idx[j];
                let a = cache.weights[j];
                let vi = &cache.v_t[i * co..(i + 1) * co];
                let dv = &mut dv_t[i * co..(i + 1) * co];
                let mut dai = T::zero();
                for ch in 0..co {
                    dv[ch] += a * dao[ch];
                    dai += dao[ch] * vi[ch];
                }
                da.push(dai);
                sum += a * dai;
            }
            let mo = cache.m[o];
            let scale = mo * mo * inv_sqrt_d;
            let dscale = T::c(2.0) * mo * inv_sqrt_d;
            let qo = &cache.q_t[o * d..(o + 1) * d];
            for (jj, j) in (lo..hi).enumerate() {
                let i = cache.win_idx[j];
                let ds = cache.weights[j] * (da[jj] - sum);
                dm[o] += ds * dscale * cache.dots[j];
                let ki = &cache.k_t[i * d..(i + 1) * d];
                let dq = &mut dq_t[o * d..(o + 1) * d];
                for t in 0..d {
                    dq[t] += ds * scale * ki[t];
                }
                let dk = &mut dk_t[i * d..(i + 1) * d];
                for t in 0..d {
                    dk[t] += ds * scale * qo[t];
                }
            }
        }

        let dmask: Vec<T> = dm
            .iter()
            .zip(&cache.m)
            .map(|(&g, &m)| g * m * (T::one() - m))
            .collect();
        let mut dcols = self.mask_conv.backward_cols(&cache.cols, &dmask, p);
        let dcols_c = self.conv.backward_cols(&cache.cols, &dxc, p);
        dcols.iter_mut().zip(&dcols_c).for_each(|(a, &b)| *a += b);
        let mut dx = if k == 1 && s == 1 {
            Array3::from_shape_vec((c, h, w), dcols).unwrap()
        } else {
            col2im(&dcols, c, h, w, k, s, k / 2, ho, wo)
        };

        let dq = transpose(&dq_t, p, d);
        let dk = transpose(&dk_t, hw, d);
        let dv = transpose(&dv_t, hw, co);
        let dcenters = self.query.backward_cols(&cache.centers, &dq, p);
        let dxk = self.key.backward_cols(&cache.x_flat, &dk, hw);
        let dxv = self.value.backward_cols(&cache.x_flat, &dv, hw);
        let dxs = dx.as_slice_mut().unwrap();
        for i in 0..c * hw {
            dxs[i] += dxk[i] + dxv[i];
        }
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    dxs[ci * hw + (oy * s) * w + ox * s] += dcenters[ci * p + oy * wo + ox];
                }
            }
        }
        dx
    }
}

impl<T: Float> Module<T> for Cab<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.mask_conv.visit_params(&join(prefix, "mask_conv"), f);
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.query.visit_params(&join(prefix, "query"), f);
        self.key.visit_params(&join(prefix, "key"), f);
        self.value.visit_params(&join(prefix, "value"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.mask_conv.visit_params_mut(&join(prefix, "mask_conv"), f);
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.query.visit_params_mut(&join(prefix, "query"), f);
        self.key.visit_params_mut(&join(prefix, "key"), f);
        self.value.visit_params_mut(&join(prefix, "value"), f);
    }
}
