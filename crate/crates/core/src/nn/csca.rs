//! Cross-scale contextual attention.
//!
//! Features are projected to half width along two branches. Each branch runs
//! patch attention: patches touching a masked position (queries) are rebuilt
//! as softmax-weighted sums of fully observed patches (keys/values), with
//! weights from cosine similarity. The second branch attends at half
//! resolution and is upsampled back. A 1×1 projection fuses the concatenated
//! branches.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Array3};
use rand::Rng;

use super::ops::{bilinear_resize, bilinear_resize_backward, nearest_resize_flags, Conv2d, Conv2dCache};
use super::{join, Float, Module, Param};
use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

static DEGENERATE_SCALES: AtomicU64 = AtomicU64::new(0);

/// How often a scale had no fully observed patch (process-wide).
pub fn degenerate_scale_count() -> u64 {
    DEGENERATE_SCALES.load(Ordering::Relaxed)
}

/// Saved state of one patch-attention pass.
#[derive(Debug, Clone)]
pub struct PatchAttention<T> {
    dim: (usize, usize, usize),
    patch: usize,
    /// Flat centers of query / key patches.
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
    q_patch: Vec<T>,
    k_patch: Vec<T>,
    q_norm: Vec<T>,
    k_norm: Vec<T>,
    /// Cosine similarities, `queries × keys`.
    pub sims: Vec<T>,
    /// Softmax weights, `queries × keys`.
    pub weights: Vec<T>,
    /// Masked positions and how many query patches cover each.
    masked: Vec<(usize, usize)>,
    cover: Vec<usize>,
}

impl<T: Float> PatchAttention<T> {
    pub fn is_identity(&self) -> bool {
        self.queries.is_empty() || self.keys.is_empty()
    }

    fn patch_dim(&self) -> usize {
        self.dim.0 * self.patch * self.patch
    }
}

fn extract_patch<T: Float>(feat: &Array3<T>, cy: usize, cx: usize, patch: usize, out: &mut [T]) {
    let (c, h, w) = feat.dim();
    let pad = (patch / 2) as isize;
    let mut t = 0;
    for ci in 0..c {
        for dy in 0..patch as isize {
            for dx in 0..patch as isize {
                let (y, x) = (cy as isize + dy - pad, cx as isize + dx - pad);
                out[t] = if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    feat[[ci, y as usize, x as usize]]
                } else {
                    T::zero()
                };
                t += 1;
            }
        }
    }
}

fn scatter_patch<T: Float>(grad: &mut Array3<T>, cy: usize, cx: usize, patch: usize, g: &[T]) {
    let (c, h, w) = grad.dim();
    let pad = (patch / 2) as isize;
    let mut t = 0;
    for ci in 0..c {
        for dy in 0..patch as isize {
            for dx in 0..patch as isize {
                let (y, x) = (cy as isize + dy - pad, cx as isize + dx - pad);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    grad[[ci, y as usize, x as usize]] += g[t];
                }
                t += 1;
            }
        }
    }
}

/// In-bounds positions of the `patch × patch` window centered at `(cy, cx)`.
fn window(h: usize, w: usize, cy: usize, cx: usize, patch: usize) -> impl Iterator<Item = (usize, usize)> {
    let pad = (patch / 2) as isize;
    (-pad..=pad).flat_map(move |dy| {
        (-pad..=pad).filter_map(move |dx| {
            let (y, x) = (cy as isize + dy, cx as isize + dx);
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then_some((y as usize, x as usize))
        })
    })
}

/// Rebuild masked regions of `feat` from fully observed patches.
///
/// Observed positions are copied through unchanged. With no masked position
/// or no fully observed patch the map is returned as is.
pub fn patch_attention<T: Float>(feat: &Array3<T>, flags: &Array2<u8>, patch: usize) -> Result<(Array3<T>, PatchAttention<T>)> {
    let (c, h, w) = feat.dim();
    if flags.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "flag map {:?} does not match features {h}x{w}",
            flags.dim()
        )));
    }
    if patch == 0 || patch.is_multiple_of(2) || patch > h || patch > w {
        return Err(Error::Shape(format!("patch size {patch} invalid for {h}x{w} features")));
    }

    let mut queries = Vec::new();
    let mut keys = Vec::new();
    for cy in 0..h {
        for cx in 0..w {
            let mut any_masked = false;
            let mut all_observed = true;
            for (y, x) in window(h, w, cy, cx, patch) {
                let observed = flags[[y, x]] != 0;
                any_masked |= !observed;
                all_observed &= observed;
            }
            if any_masked {
                queries.push(cy * w + cx);
            }
            if all_observed {
                keys.push(cy * w + cx);
            }
        }
    }

    let mut state = PatchAttention {
        dim: (c, h, w),
        patch,
        queries,
        keys,
        q_patch: Vec::new(),
        k_patch: Vec::new(),
        q_norm: Vec::new(),
        k_norm: Vec::new(),
        sims: Vec::new(),
        weights: Vec::new(),
        masked: Vec::new(),
        cover: Vec::new(),
    };
    if state.queries.is_empty() {
        return Ok((feat.clone(), state));
    }
    if state.keys.is_empty() {
        let n = DEGENERATE_SCALES.fetch_add(1, Ordering::Relaxed) + 1;
        if n.is_power_of_two() {
            log::warn!("patch attention at {h}x{w}: no fully observed patch, passing features through ({n} so far)");
        }
        state.queries.clear();
        return Ok((feat.clone(), state));
    }

    let d = state.patch_dim();
    let (nq, nk) = (state.queries.len(), state.keys.len());
    let floor = T::c(NORM_FLOOR);
    let mut q_patch = vec![T::zero(); nq * d];
    let mut k_patch = vec![T::zero(); nk * d];
    for (i, &q) in state.queries.iter().enumerate() {
        extract_patch(feat, q / w, q % w, patch, &mut q_patch[i * d..(i + 1) * d]);
    }
    for (j, &k) in state.keys.iter().enumerate() {
        extract_patch(feat, k / w, k % w, patch, &mut k_patch[j * d..(j + 1) * d]);
    }
    let norm = |v: &[T]| v.iter().map(|&a| a * a).sum::<T>().sqrt();
    let q_norm: Vec<T> = q_patch.chunks(d).map(norm).collect();
    let k_norm: Vec<T> = k_patch.chunks(d).map(norm).collect();

    let mut sims = vec![T::zero(); nq * nk];
    super::gemm(nq, d, nk, &q_patch, false, &k_patch, true, &mut sims, false);
    for i in 0..nq {
        for j in 0..nk {
            let den = q_norm[i] * k_norm[j];
            let v = &mut sims[i * nk + j];
            *v = if q_norm[i] > floor && k_norm[j] > floor {
                *v / den
            } else {
                T::zero()
            };
        }
    }
    let mut weights = sims.clone();
    for row in weights.chunks_mut(nk) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    let mut recon = vec![T::zero(); nq * d];
    super::gemm(nq, nk, d, &weights, false, &k_patch, false, &mut recon, false);

    // fold: average every covering query patch at masked positions
    let mut out = feat.clone();
    let mut query_slot = vec![usize::MAX; h * w];
    for (i, &q) in state.queries.iter().enumerate() {
        query_slot[q] = i;
    }
    let pad = patch / 2;
    let pp = patch * patch;
    let mut masked = Vec::new();
    let mut cover = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if flags[[y, x]] != 0 {
                continue;
            }
            let centers: Vec<(usize, usize)> = window(h, w, y, x, patch).collect();
            let n = centers.len();
            let inv = T::one() / T::c(n as f64);
            for ci in 0..c {
                let mut acc = T::zero();
                for &(cy, cx) in &centers {
                    let slot = query_slot[cy * w + cx];
                    let off = ci * pp + (y + pad - cy) * patch + (x + pad - cx);
                    acc += recon[slot * d + off];
                }
                out[[ci, y, x]] = acc * inv;
            }
            masked.push((y, x));
            cover.push(n);
        }
    }

    state.q_patch = q_patch;
    state.k_patch = k_patch;
    state.q_norm = q_norm;
    state.k_norm = k_norm;
    state.sims = sims;
    state.weights = weights;
    state.masked = masked;
    state.cover = cover;
    Ok((out, state))
}

pub fn patch_attention_backward<T: Float>(state: &PatchAttention<T>, dout: &Array3<T>) -> Array3<T> {
    if state.is_identity() {
        return dout.clone();
    }
    let (c, h, w) = state.dim;
    let patch = state.patch;
    let pad = patch / 2;
    let pp = patch * patch;
    let d = state.patch_dim();
    let (nq, nk) = (state.queries.len(), state.keys.len());

    let mut dfeat = dout.clone();
    let mut query_slot = vec![usize::MAX; h * w];
    for (i, &q) in state.queries.iter().enumerate() {
        query_slot[q] = i;
    }
    let mut drecon = vec![T::zero(); nq * d];
    for (&(y, x), &n) in state.masked.iter().zip(&state.cover) {
        let inv = T::one() / T::c(n as f64);
        for ci in 0..c {
            let g = dout[[ci, y, x]] * inv;
            dfeat[[ci, y, x]] = T::zero();
            for (cy, cx) in window(h, w, y, x, patch) {
                let slot = query_slot[cy * w + cx];
                drecon[slot * d + ci * pp + (y + pad - cy) * patch + (x + pad - cx)] += g;
            }
        }
    }

    // recon = A · V
    let mut dk_patch = vec![T::zero(); nk * d];
    super::gemm(nk, nq, d, &state.weights, true, &drecon, false, &mut dk_patch, false);
    let mut da = vec![T::zero(); nq * nk];
    super::gemm(nq, d, nk, &drecon, false, &state.k_patch, true, &mut da, false);
    let mut ds = vec![T::zero(); nq * nk];
    for i in 0..nq {
        let row_a = &state.weights[i * nk..(i + 1) * nk];
        let row_da = &da[i * nk..(i + 1) * nk];
        let dot: T = row_a.iter().zip(row_da).map(|(&a, &g)| a * g).sum();
        for j in 0..nk {
            ds[i * nk + j] = row_a[j] * (row_da[j] - dot);
        }
    }

    // s = q̃·k̃ ; ∂s/∂q = (k̃ − s q̃)/|q| ; ∂s/∂k = (q̃ − s k̃)/|k|
    let floor = T::c(NORM_FLOOR);
    let mut dq_patch = vec![T::zero(); nq * d];
    for i in 0..nq {
        let qn = state.q_norm[i];
        if qn <= floor {
            continue;
        }
        let q = &state.q_patch[i * d..(i + 1) * d];
        for j in 0..nk {
            let kn = state.k_norm[j];
            let g = ds[i * nk + j];
            if kn <= floor || g == T::zero() {
                continue;
            }
            let sim = state.sims[i * nk + j];
            let k = &state.k_patch[j * d..(j + 1) * d];
            let (cq, ck) = (g / (qn * kn), g * sim / (qn * qn));
            let (dk_c, dq_c) = (g / (qn * kn), g * sim / (kn * kn));
            let dq = &mut dq_patch[i * d..(i + 1) * d];
            for t in 0..d {
                dq[t] += cq * k[t] - ck * q[t];
            }
            let dk = &mut dk_patch[j * d..(j + 1) * d];
            for t in 0..d {
                dk[t] += dk_c * q[t] - dq_c * k[t];
            }
        }
    }

    for (i, &q) in state.queries.iter().enumerate() {
        scatter_patch(&mut dfeat, q / w, q % w, patch, &dq_patch[i * d..(i + 1) * d]);
    }
    for (j, &k) in state.keys.iter().enumerate() {
        scatter_patch(&mut dfeat, k / w, k % w, patch, &dk_patch[j * d..(j + 1) * d]);
    }
    dfeat
}

#[derive(Debug, Clone)]
pub struct Csca<T> {
    pub reduce_fine: Conv2d<T>,
    pub reduce_coarse: Conv2d<T>,
    pub fuse: Conv2d<T>,
    pub channels: usize,
    pub patch: usize,
}

#[derive(Debug, Clone)]
pub struct CscaCache<T> {
    hw: (usize, usize),
    coarse_hw: (usize, usize),
    red_fine: Conv2dCache<T>,
    red_coarse: Conv2dCache<T>,
    pub fine: PatchAttention<T>,
    pub coarse: PatchAttention<T>,
    fuse: Conv2dCache<T>,
}

impl<T: Float> Csca<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, patch: usize, rng: &mut R) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::Shape(format!("CSCA needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        Ok(Self {
            reduce_fine: Conv2d::new(channels, half, 1, 1, 0, rng),
            reduce_coarse: Conv2d::new(channels, half, 1, 1, 0, rng),
            fuse: Conv2d::new(channels, channels, 1, 1, 0, rng),
            channels,
            patch,
        })
    }

    /// `flags` is the observed/masked map at the feature resolution.
    pub fn forward(&self, x: &Array3<T>, flags: &Array2<u8>) -> Result<(Array3<T>, CscaCache<T>)> {
        let (c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Shape(format!("CSCA expects {} channels, got {c}", self.channels)));
        }
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("CSCA needs at least 2x2 features, got {h}x{w}")));
        }
        let half = c / 2;
        let (hc, wc) = (h / 2, w / 2);

        let (rf, red_fine) = self.reduce_fine.forward(x)?;
        let (yf, fine) = patch_attention(&rf, flags, self.patch)?;

        let (rc, red_coarse) = self.reduce_coarse.forward(x)?;
        let rc_small = bilinear_resize(&rc, hc, wc);
        let flags_small = nearest_resize_flags(flags, hc, wc);
        let (yc_small, coarse) = patch_attention(&rc_small, &flags_small, self.patch.min(hc).min(wc) | 1)?;
        let yc = bilinear_resize(&yc_small, h, w);

        let mut cat = Array3::<T>::zeros((c, h, w));
        cat.slice_mut(s![..half, .., ..]).assign(&yf);
        cat.slice_mut(s![half.., .., ..]).assign(&yc);
        let (out, fuse) = self.fuse.forward(&cat)?;
        Ok((
            out,
            CscaCache {
                hw: (h, w),
                coarse_hw: (hc, wc),
                red_fine,
                red_coarse,
                fine,
                coarse,
                fuse,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CscaCache<T>, dy: &Array3<T>) -> Array3<T> {
        let half = self.channels / 2;
        let (h, w) = cache.hw;
        let (hc, wc) = cache.coarse_hw;
        let dcat = self.fuse.backward(&cache.fuse, dy);
        let dyf = dcat.slice(s![..half, .., ..]).to_owned();
        let dyc = dcat.slice(s![half.., .., ..]).to_owned();

        let drf = patch_attention_backward(&cache.fine, &dyf);
        let mut dx = self.reduce_fine.backward(&cache.red_fine, &drf);

        let dyc_small = bilinear_resize_backward(&dyc, hc, wc);
        let drc_small = patch_attention_backward(&cache.coarse, &dyc_small);
        let drc = bilinear_resize_backward(&drc_small, h, w);
        dx += &self.reduce_coarse.backward(&cache.red_coarse, &drc);
        dx
    }
}

impl<T: Float> Module<T> for Csca<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.reduce_fine.visit_params(&join(prefix, "reduce_fine"), f);
        self.reduce_coarse.visit_params(&join(prefix, "reduce_coarse"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.reduce_fine.visit_params_mut(&join(prefix, "reduce_fine"), f);
        self.reduce_coarse.visit_params_mut(&join(prefix, "reduce_coarse"), f);
        self.fuse.visit_params_mut(&join(prefix, "fuse"), f);
    }
}
