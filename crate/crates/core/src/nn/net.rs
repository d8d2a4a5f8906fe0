//! The CANet layer stack: masked CSI tensor in, full CSI tensor out.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cab::{default_qk_dim, Cab, CabCache};
use super::convnext::{ConvNextBlock, ConvNextCache};
use super::csca::{Csca, CscaCache};
use super::ops::{
    bilinear_resize, bilinear_resize_backward, leaky_relu, leaky_relu_backward, nearest_resize_flags, Conv2d,
    Conv2dCache,
};
use super::{join, Float, Module, Param};
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Cab,
    Csca,
    ConvNext,
    BilinearUp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    LeakyRelu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Spatial stride; the scale factor for upsampling layers.
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn new(kind: LayerKind, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        let activation = match kind {
            LayerKind::Cab => Activation::LeakyRelu,
            LayerKind::ConvNext => Activation::Gelu,
            _ => Activation::None,
        };
        Self {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub m_t: usize,
    pub n_y: usize,
    pub n_x: usize,
    /// Append the observed/masked flag map as an extra input channel.
    pub flag_channel: bool,
    pub dropout: f64,
    pub csca_patch: usize,
    pub layers: Vec<LayerSpec>,
}

pub const DEFAULT_CSCA_PATCH: usize = 1;

impl ArchConfig {
    /// The 22-layer stack at full width.
    pub fn table(m_t: usize, n_y: usize, n_x: usize, flag_channel: bool) -> Self {
        Self::scaled(m_t, n_y, n_x, flag_channel, 1)
    }

    /// Same structure with every hidden width divided by `width_div`.
    pub fn scaled(m_t: usize, n_y: usize, n_x: usize, flag_channel: bool, width_div: usize) -> Self {
        use LayerKind::*;
        let d = |c: usize| (c / width_div.max(1)).max(2);
        let c_in = 2 * m_t + flag_channel as usize;
        let mut layers = vec![
            LayerSpec::new(Cab, c_in, d(64), 5, 1),
            LayerSpec::new(Cab, d(64), d(128), 3, 1),
            LayerSpec::new(Cab, d(128), d(128), 3, 2),
            LayerSpec::new(Cab, d(128), d(256), 3, 1),
            LayerSpec::new(Cab, d(256), d(256), 3, 1),
            LayerSpec::new(Csca, d(256), d(256), 1, 1),
        ];
        layers.extend((0..10).map(|_| LayerSpec::new(ConvNext, d(256), d(256), 7, 1)));
        layers.extend([
            LayerSpec::new(BilinearUp, d(256), d(256), 1, 2),
            LayerSpec::new(Cab, d(256), d(128), 3, 1),
            LayerSpec::new(Cab, d(128), d(128), 3, 1),
            LayerSpec::new(Cab, d(128), d(64), 3, 1),
            LayerSpec::new(Cab, d(64), d(64), 3, 1),
            LayerSpec::new(Conv, d(64), 2 * m_t, 7, 1),
        ]);
        Self {
            m_t,
            n_y,
            n_x,
            flag_channel,
            dropout: 0.5,
            csca_patch: DEFAULT_CSCA_PATCH,
            layers,
        }
    }

    pub fn input_channels(&self) -> usize {
        2 * self.m_t + self.flag_channel as usize
    }

    /// `(input, output)` shape of every layer, validating the channel chain.
    pub fn shape_trace(&self) -> Result<Vec<((usize, usize, usize), (usize, usize, usize))>> {
        let mut shape = (self.input_channels(), self.n_y, self.n_x);
        let mut trace = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (c, h, w) = shape;
            if l.in_channels != c {
                return Err(Error::Shape(format!(
                    "layer {}: expects {} channels, previous layer gives {c}",
                    i + 1,
                    l.in_channels
                )));
            }
            if l.kernel == 0 || l.stride == 0 {
                return Err(Error::Shape(format!("layer {}: zero kernel or stride", i + 1)));
            }
            let out = match l.kind {
                LayerKind::Cab | LayerKind::Conv => {
                    if l.stride > 1 && (h % l.stride != 0 || w % l.stride != 0) {
                        return Err(Error::Shape(format!(
                            "layer {}: spatial size {h}x{w} not divisible by stride {}",
                            i + 1,
                            l.stride
                        )));
                    }
                    (l.out_channels, h / l.stride, w / l.stride)
                }
                LayerKind::Csca => {
                    if c % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Shape(format!(
                            "layer {}: CSCA needs even channels and spatial size, got {c}x{h}x{w}",
                            i + 1
                        )));
                    }
                    if l.out_channels != c {
                        return Err(Error::Shape(format!("layer {}: CSCA must preserve channels", i + 1)));
                    }
                    if self.csca_patch > h / 2 || self.csca_patch > w / 2 {
                        return Err(Error::Shape(format!(
                            "layer {}: patch {} too large for {h}x{w}",
                            i + 1,
                            self.csca_patch
                        )));
                    }
                    shape
                }
                LayerKind::ConvNext => {
                    if l.out_channels != c {
                        return Err(Error::Shape(format!("layer {}: ConvNeXt must preserve channels", i + 1)));
                    }
                    shape
                }
                LayerKind::BilinearUp => {
                    if l.out_channels != c {
                        return Err(Error::Shape(format!("layer {}: upsampling must preserve channels", i + 1)));
                    }
                    (c, h * l.stride, w * l.stride)
                }
            };
            trace.push((shape, out));
            shape = out;
        }
        if shape != (2 * self.m_t, self.n_y, self.n_x) {
            return Err(Error::Shape(format!(
                "stack ends at {shape:?}, expected {:?}",
                (2 * self.m_t, self.n_y, self.n_x)
            )));
        }
        Ok(trace)
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Cab(Cab<T>),
    Csca(Csca<T>),
    ConvNext(ConvNextBlock<T>),
    Up(usize),
    Conv(Conv2d<T>),
}

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Cab { pre: Array3<T>, cache: CabCache<T> },
    Csca(CscaCache<T>),
    ConvNext(ConvNextCache<T>),
    Up { in_hw: (usize, usize) },
    Conv(Conv2dCache<T>),
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub layers: Vec<LayerCache<T>>,
}

#[derive(Debug, Clone)]
pub struct CaNet<T> {
    pub arch: ArchConfig,
    pub layers: Vec<Layer<T>>,
}

impl<T: Float> CaNet<T> {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.shape_trace()?;
        let mut rng = rng_from(seed, &[stream::INIT]);
        let layers = arch
            .layers
            .iter()
            .map(|l| {
                Ok(match l.kind {
                    LayerKind::Cab => Layer::Cab(Cab::new(
                        l.in_channels,
                        l.out_channels,
                        l.kernel,
                        l.stride,
                        default_qk_dim(l.out_channels),
                        &mut rng,
                    )),
                    LayerKind::Csca => Layer::Csca(Csca::new(l.in_channels, arch.csca_patch, &mut rng)?),
                    LayerKind::ConvNext => Layer::ConvNext(ConvNextBlock::new(l.in_channels, l.kernel, arch.dropout, &mut rng)),
                    LayerKind::BilinearUp => Layer::Up(l.stride),
                    LayerKind::Conv => Layer::Conv(Conv2d::same(l.in_channels, l.out_channels, l.kernel, l.stride, &mut rng)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, layers })
    }

    /// `x` is the network input (masked tensor plus optional flag channel);
    /// `flags` is the full-resolution observed map.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Array3<T>,
        flags: &Array2<u8>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Array3<T>, ForwardCache<T>)> {
        let expect = (self.arch.input_channels(), self.arch.n_y, self.arch.n_x);
        if x.dim() != expect {
            return Err(Error::Shape(format!("network input {:?}, expected {expect:?}", x.dim())));
        }
        if flags.dim() != (self.arch.n_y, self.arch.n_x) {
            return Err(Error::Shape(format!("flag map {:?} does not match the grid", flags.dim())));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Cab(cab) => {
                    let (pre, cache) = cab.forward(&h)?;
                    (leaky_relu(&pre), LayerCache::Cab { pre, cache })
                }
                Layer::Csca(csca) => {
                    let (_, fh, fw) = h.dim();
                    let f = nearest_resize_flags(flags, fh, fw);
                    let (y, cache) = csca.forward(&h, &f)?;
                    (y, LayerCache::Csca(cache))
                }
                Layer::ConvNext(block) => {
                    let (y, cache) = block.forward(&h, training, rng)?;
                    (y, LayerCache::ConvNext(cache))
                }
                Layer::Up(factor) => {
                    let (_, hh, ww) = h.dim();
                    (
                        bilinear_resize(&h, hh * factor, ww * factor),
                        LayerCache::Up { in_hw: (hh, ww) },
                    )
                }
                Layer::Conv(conv) => {
                    let (y, cache) = conv.forward(&h)?;
                    (y, LayerCache::Conv(cache))
                }
            };
            h = next;
            caches.push(cache);
        }
        Ok((h, ForwardCache { layers: caches }))
    }

    /// Eval-mode forward without keeping caches alive.
    pub fn predict(&self, x: &Array3<T>, flags: &Array2<u8>) -> Result<Array3<T>> {
        let mut unused = rng_from(0, &[]);
        Ok(self.forward(x, flags, false, &mut unused)?.0)
    }

    /// Accumulate parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dout: &Array3<T>) -> Array3<T> {
        let mut g = dout.clone();
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            g = match (layer, lc) {
                (Layer::Cab(cab), LayerCache::Cab { pre, cache }) => cab.backward(cache, &leaky_relu_backward(pre, &g)),
                (Layer::Csca(csca), LayerCache::Csca(cache)) => csca.backward(cache, &g),
                (Layer::ConvNext(block), LayerCache::ConvNext(cache)) => block.backward(cache, &g),
                (Layer::Up(_), LayerCache::Up { in_hw }) => bilinear_resize_backward(&g, in_hw.0, in_hw.1),
                (Layer::Conv(conv), LayerCache::Conv(cache)) => conv.backward(cache, &g),
                _ => unreachable!("cache does not match layer"),
            };
        }
        g
    }

    /// Copy parameter values (not gradients) from another precision.
    pub fn load_values_from<U: Float>(&mut self, other: &CaNet<U>) -> Result<()> {
        let mut src = Vec::new();
        other.visit_params("", &mut |name, p| src.push((name.to_string(), p.value.clone())));
        let mut i = 0;
        let mut err = None;
        self.visit_params_mut("", &mut |name, p| {
            match src.get(i) {
                Some((n, v)) if n == name && v.len() == p.len() => {
                    p.value.iter_mut().zip(v).for_each(|(d, s)| *d = T::c(Float::to_f64(*s)));
                }
                _ => err = Some(format!("parameter {name} does not match")),
            }
            i += 1;
        });
        match err {
            Some(e) => Err(Error::Shape(e)),
            None if i != src.len() => Err(Error::Shape("parameter count mismatch".into())),
            None => Ok(()),
        }
    }
}

impl<T: Float> Module<T> for CaNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layers.{i:02}"));
            match layer {
                Layer::Cab(m) => m.visit_params(&p, f),
                Layer::Csca(m) => m.visit_params(&p, f),
                Layer::ConvNext(m) => m.visit_params(&p, f),
                Layer::Up(_) => {}
                Layer::Conv(m) => m.visit_params(&p, f),
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layers.{i:02}"));
            match layer {
                Layer::Cab(m) => m.visit_params_mut(&p, f),
                Layer::Csca(m) => m.visit_params_mut(&p, f),
                Layer::ConvNext(m) => m.visit_params_mut(&p, f),
                Layer::Up(_) => {}
                Layer::Conv(m) => m.visit_params_mut(&p, f),
            }
        }
    }
}
