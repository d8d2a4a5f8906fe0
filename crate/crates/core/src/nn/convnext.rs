//! ConvNeXt-v2 block with global response normalization and dropout.

use ndarray::Array3;
use rand::Rng;

use super::ops::{
    dropout_mask, gelu, gelu_grad, ChannelLayerNorm, Conv2d, Conv2dCache, DepthwiseConv2d, LayerNormCache,
};
use super::{join, Float, Module, Param};
use crate::error::{Error, Result};

pub const GRN_EPS: f64 = 1e-6;

/// Global response normalization: `γ·(x·N) + β + x`, with `N_c = G_c / (mean(G) + ε)`
/// and `G_c` the spatial L2 norm of channel `c`.
#[derive(Debug, Clone)]
pub struct Grn<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Debug, Clone)]
pub struct GrnCache<T> {
    x: Array3<T>,
    gnorm: Vec<T>,
    /// Normalized response `N_c`.
    pub nfac: Vec<T>,
    gmean: T,
}

impl<T: Float> Grn<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::zeros(&[channels]),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, GrnCache<T>) {
        let (c, h, w) = x.dim();
        let p = h * w;
        let xs = x.as_slice().unwrap();
        let gnorm: Vec<T> = (0..c)
            .map(|ci| xs[ci * p..(ci + 1) * p].iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let gmean = gnorm.iter().copied().sum::<T>() / T::c(c as f64);
        let denom = gmean + T::c(GRN_EPS);
        let nfac: Vec<T> = gnorm.iter().map(|&g| g / denom).collect();
        let mut y = x.clone();
        {
            let ys = y.as_slice_mut().unwrap();
            for ci in 0..c {
                let (g, b, n) = (self.gamma.value[ci], self.beta.value[ci], nfac[ci]);
                for v in &mut ys[ci * p..(ci + 1) * p] {
                    *v = g * (*v * n) + b + *v;
                }
            }
        }
        (
            y,
            GrnCache {
                x: x.clone(),
                gnorm,
                nfac,
                gmean,
            },
        )
    }

    pub fn backward(&mut self, cache: &GrnCache<T>, dy: &Array3<T>) -> Array3<T> {
        let (c, h, w) = dy.dim();
        let p = h * w;
        let xs = cache.x.as_slice().unwrap();
        let gs = dy.as_slice().unwrap();
        let denom = cache.gmean + T::c(GRN_EPS);
        let mut dx = Array3::<T>::zeros((c, h, w));
        let dxs = dx.as_slice_mut().unwrap();

        let mut dn = vec![T::zero(); c];
        for ci in 0..c {
            let (g, n) = (self.gamma.value[ci], cache.nfac[ci]);
            let mut sum_gx = T::zero();
            let mut sum_g = T::zero();
            for i in ci * p..(ci + 1) * p {
                sum_gx += gs[i] * xs[i];
                sum_g += gs[i];
                dxs[i] = gs[i] * (T::one() + g * n);
            }
            self.gamma.grad[ci] += sum_gx * n;
            self.beta.grad[ci] += sum_g;
            dn[ci] = g * sum_gx;
        }
        // N_c = G_c / (mean(G) + ε)
        let dgmean = -dn
            .iter()
            .zip(&cache.gnorm)
            .map(|(&d, &g)| d * g)
            .sum::<T>()
            / (denom * denom);
        let cf = T::c(c as f64);
        for ci in 0..c {
            let dg = dn[ci] / denom + dgmean / cf;
            let gn = cache.gnorm[ci];
            if gn > T::zero() {
                for i in ci * p..(ci + 1) * p {
                    dxs[i] += dg * xs[i] / gn;
                }
            }
        }
        dx
    }
}

impl<T: Float> Module<T> for Grn<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// depthwise k×k → LayerNorm → 1×1 (×4) → GELU → GRN → 1×1 → dropout → residual.
#[derive(Debug, Clone)]
pub struct ConvNextBlock<T> {
    pub dwconv: DepthwiseConv2d<T>,
    pub norm: ChannelLayerNorm<T>,
    pub pwconv1: Conv2d<T>,
    pub grn: Grn<T>,
    pub pwconv2: Conv2d<T>,
    pub channels: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct ConvNextCache<T> {
    x: Array3<T>,
    ln: LayerNormCache<T>,
    pw1: Conv2dCache<T>,
    pre_act: Array3<T>,
    grn: GrnCache<T>,
    pw2: Conv2dCache<T>,
    drop: Option<Array3<T>>,
}

impl<T: Float> ConvNextBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, dropout: f64, rng: &mut R) -> Self {
        Self {
            dwconv: DepthwiseConv2d::new(channels, kernel, rng),
            norm: ChannelLayerNorm::new(channels),
            pwconv1: Conv2d::new(channels, 4 * channels, 1, 1, 0, rng),
            grn: Grn::new(4 * channels),
            pwconv2: Conv2d::new(4 * channels, channels, 1, 1, 0, rng),
            channels,
            dropout,
        }
    }

    /// Dropout is drawn from `rng` only when `training` and the rate is positive.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Array3<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Array3<T>, ConvNextCache<T>)> {
        if x.dim().0 != self.channels {
            return Err(Error::Shape(format!(
                "ConvNeXt block expects {} channels, got {}",
                self.channels,
                x.dim().0
            )));
        }
        let h = self.dwconv.forward(x);
        let (h, ln) = self.norm.forward(&h);
        let (pre_act, pw1) = self.pwconv1.forward(&h)?;
        let act = pre_act.mapv(gelu);
        let (h, grn) = self.grn.forward(&act);
        let (mut branch, pw2) = self.pwconv2.forward(&h)?;
        let drop = if training && self.dropout > 0.0 {
            let mask = dropout_mask::<T, R>(branch.dim(), self.dropout, rng);
            branch *= &mask;
            Some(mask)
        } else {
            None
        };
        let out = &branch + x;
        Ok((
            out,
            ConvNextCache {
                x: x.clone(),
                ln,
                pw1,
                pre_act,
                grn,
                pw2,
                drop,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ConvNextCache<T>, dy: &Array3<T>) -> Array3<T> {
        let mut g = dy.clone();
        if let Some(mask) = &cache.drop {
            g *= mask;
        }
        let g = self.pwconv2.backward(&cache.pw2, &g);
        let g = self.grn.backward(&cache.grn, &g);
        let mut g = g;
        ndarray::Zip::from(&mut g)
            .and(&cache.pre_act)
            .for_each(|d, &v| *d *= gelu_grad(v));
        let g = self.pwconv1.backward(&cache.pw1, &g);
        let g = self.norm.backward(&cache.ln, &g);
        let g = self.dwconv.backward(&cache.x, &g);
        g + dy
    }
}

impl<T: Float> Module<T> for ConvNextBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.dwconv.visit_params(&join(prefix, "dwconv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.pwconv1.visit_params(&join(prefix, "pwconv1"), f);
        self.grn.visit_params(&join(prefix, "grn"), f);
        self.pwconv2.visit_params(&join(prefix, "pwconv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.dwconv.visit_params_mut(&join(prefix, "dwconv"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.pwconv1.visit_params_mut(&join(prefix, "pwconv1"), f);
        self.grn.visit_params_mut(&join(prefix, "grn"), f);
        self.pwconv2.visit_params_mut(&join(prefix, "pwconv2"), f);
    }
}
