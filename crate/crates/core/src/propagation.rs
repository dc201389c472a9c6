//! Affinity-guided spatial propagation.
//!
//! One step updates every pixel from the previous state only (Jacobi style):
//!
//! ```text
//! D[t](p) = w_center(p) * D[0](p) + sum_{o != 0} w_o(p) * D[t-1](clamp(p + o))
//! ```
//!
//! The stencil is a `C x C` window (odd `C`); the center channel anchors each
//! pixel to the initial depth. With `seed_reinjection`, seed pixels are reset
//! to their measured values after every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::raster::{DepthRaster, SparseDepth};

pub const DEFAULT_STENCIL: usize = 7;
pub const DEFAULT_STEPS: usize = 6;

/// Per-pixel stencil weights, stored planar: channel `k` is a full `H x W`
/// plane, with `k = (dy + r) * C + (dx + r)` for offsets in `-r..=r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    height: usize,
    width: usize,
    stencil: usize,
    weights: Vec<f32>,
}

impl AffinityField {
    pub fn new(height: usize, width: usize, stencil: usize, weights: Vec<f32>) -> Result<Self> {
        if stencil < 3 || stencil.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "stencil size must be odd and >= 3, got {stencil}"
            )));
        }
        crate::raster::check_dims(height, width, weights.len(), stencil * stencil)?;
        Ok(Self {
            height,
            width,
            stencil,
            weights,
        })
    }

    /// One-hot center everywhere: propagation leaves the initial depth alone.
    pub fn identity(height: usize, width: usize, stencil: usize) -> Result<Self> {
        let mut field = Self::new(height, width, stencil, vec![0.0; stencil * stencil * height * width])?;
        let c = field.center();
        field.channel_mut(c).fill(1.0);
        Ok(field)
    }

    /// Equal weight `1 / C^2` on every stencil entry.
    pub fn uniform(height: usize, width: usize, stencil: usize) -> Result<Self> {
        let k = stencil * stencil;
        Self::new(height, width, stencil, vec![1.0 / k as f32; k * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn stencil(&self) -> usize {
        self.stencil
    }

    pub fn radius(&self) -> usize {
        self.stencil / 2
    }

    /// Number of channels, `C^2`.
    pub fn channels(&self) -> usize {
        self.stencil * self.stencil
    }

    pub fn center(&self) -> usize {
        let r = self.radius();
        r * self.stencil + r
    }

    /// `(dy, dx)` of channel `k`.
    pub fn offset(&self, k: usize) -> (isize, isize) {
        let r = self.radius() as isize;
        ((k / self.stencil) as isize - r, (k % self.stencil) as isize - r)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<f32> {
        self.weights
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.weights[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.weights[k * n..(k + 1) * n]
    }

    /// Weight of channel `k` at pixel `index`.
    #[inline]
    pub fn weight(&self, k: usize, index: usize) -> f32 {
        self.weights[k * self.height * self.width + index]
    }

    /// Swaps the spatial axes and re-indexes the stencil to match.
    pub fn transpose(&self) -> AffinityField {
        let (h, w, c) = (self.height, self.width, self.stencil);
        let n = h * w;
        let mut out = vec![0.0; self.weights.len()];
        for k in 0..c * c {
            let kt = (k % c) * c + k / c;
            let src = &self.weights[k * n..(k + 1) * n];
            let dst = &mut out[kt * n..(kt + 1) * n];
            for r in 0..h {
                for col in 0..w {
                    dst[col * h + r] = src[r * w + col];
                }
            }
        }
        AffinityField {
            height: w,
            width: h,
            stencil: c,
            weights: out,
        }
    }

    /// True if every pixel's weights are non-negative and sum to 1 within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let n = self.height * self.width;
        (0..n).all(|i| {
            let mut sum = 0.0f64;
            for k in 0..self.channels() {
                let v = self.weight(k, i);
                if !(v >= 0.0) {
                    return false;
                }
                sum += v as f64;
            }
            (sum - 1.0).abs() <= tol
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Out-of-image neighbors read the nearest edge pixel.
    #[default]
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub n_steps: usize,
    pub seed_reinjection: bool,
    #[serde(default)]
    pub boundary: Boundary,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_STEPS,
            seed_reinjection: true,
            boundary: Boundary::Clamp,
        }
    }
}

/// Per pixel: `w <- |w| / sum |w|`; an all-zero pixel becomes one-hot center.
pub fn normalize_affinity(raw: &AffinityField) -> Result<AffinityField> {
    if raw.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite affinity weight".into()));
    }
    let n = raw.height * raw.width;
    let kk = raw.channels();
    let center = raw.center();
    let mut sums = vec![0.0f32; n];
    for k in 0..kk {
        for (s, v) in sums.iter_mut().zip(raw.channel(k)) {
            *s += v.abs();
        }
    }
    let mut out = raw.clone();
    for k in 0..kk {
        let plane = out.channel_mut(k);
        for (i, v) in plane.iter_mut().enumerate() {
            let s = sums[i];
            *v = if s > 0.0 {
                v.abs() / s
            } else if k == center {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss with respect to the raw weights, given its
/// gradient with respect to the normalized weights.
pub fn normalize_affinity_backward(raw: &AffinityField, grad_normalized: &[f32]) -> Vec<f32> {
    let n = raw.height * raw.width;
    let kk = raw.channels();
    assert_eq!(grad_normalized.len(), kk * n);
    let mut sums = vec![0.0f32; n];
    for k in 0..kk {
        for (s, v) in sums.iter_mut().zip(raw.channel(k)) {
            *s += v.abs();
        }
    }
    // sum_j g_j * w_j with w = |r| / s
    let mut dot = vec![0.0f32; n];
    for k in 0..kk {
        let g = &grad_normalized[k * n..(k + 1) * n];
        for i in 0..n {
            if sums[i] > 0.0 {
                dot[i] += g[i] * raw.channel(k)[i].abs() / sums[i];
            }
        }
    }
    let mut grad = vec![0.0f32; kk * n];
    for k in 0..kk {
        let r = raw.channel(k);
        let g = &grad_normalized[k * n..(k + 1) * n];
        let out = &mut grad[k * n..(k + 1) * n];
        for i in 0..n {
            if sums[i] > 0.0 {
                let sign = if r[i] > 0.0 {
                    1.0
                } else if r[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                out[i] = sign * (g[i] - dot[i]) / sums[i];
            }
        }
    }
    grad
}

fn check_inputs(initial: &DepthRaster, seeds: &SparseDepth, affinity: &AffinityField) -> Result<()> {
    initial.expect_same_shape(seeds, "propagate seeds")?;
    if affinity.shape() != initial.shape() {
        return Err(Error::Contract(format!(
            "propagate affinity: shape {:?} vs {:?}",
            affinity.shape(),
            initial.shape()
        )));
    }
    if affinity.weights.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(
            "affinity must be normalized (finite, non-negative weights)".into(),
        ));
    }
    Ok(())
}

pub fn propagate(
    initial: &DepthRaster,
    seeds: &SparseDepth,
    affinity: &AffinityField,
    cfg: &PropagationConfig,
) -> Result<DepthRaster> {
    propagate_with(initial, seeds, affinity, cfg, Execution::default())
}

/// [`propagate`] with an explicit execution mode; rows of one step are
/// independent and may run in parallel.
pub fn propagate_with(
    initial: &DepthRaster,
    seeds: &SparseDepth,
    affinity: &AffinityField,
    cfg: &PropagationConfig,
    exec: Execution,
) -> Result<DepthRaster> {
    check_inputs(initial, seeds, affinity)?;
    let mut state = initial.values().to_vec();
    let mut next = vec![0.0f32; state.len()];
    for _ in 0..cfg.n_steps {
        step(&state, initial.values(), affinity, &mut next, exec);
        if cfg.seed_reinjection {
            reinject(&mut next, seeds.values());
        }
        std::mem::swap(&mut state, &mut next);
    }
    DepthRaster::new(initial.height(), initial.width(), state)
}

/// Every intermediate state `D[0] ..= D[n_steps]`, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PropagationTrace {
    pub states: Vec<Vec<f32>>,
    pub height: usize,
    pub width: usize,
    pub seed_reinjection: bool,
}

impl PropagationTrace {
    pub fn output(&self) -> DepthRaster {
        DepthRaster::from_values_sanitized(self.height, self.width, self.states.last().unwrap().clone())
            .expect("trace shape is consistent")
    }
}

pub fn propagate_traced(
    initial: &DepthRaster,
    seeds: &SparseDepth,
    affinity: &AffinityField,
    cfg: &PropagationConfig,
    exec: Execution,
) -> Result<PropagationTrace> {
    check_inputs(initial, seeds, affinity)?;
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    states.push(initial.values().to_vec());
    for t in 0..cfg.n_steps {
        let mut next = vec![0.0f32; initial.len()];
        step(&states[t], initial.values(), affinity, &mut next, exec);
        if cfg.seed_reinjection {
            reinject(&mut next, seeds.values());
        }
        states.push(next);
    }
    Ok(PropagationTrace {
        states,
        height: initial.height(),
        width: initial.width(),
        seed_reinjection: cfg.seed_reinjection,
    })
}

/// Gradients of the propagation output with respect to the initial depth
/// and the (normalized) affinity weights.
pub struct PropagationGrad {
    pub initial: Vec<f32>,
    pub affinity: Vec<f32>,
}

pub fn propagate_backward(
    trace: &PropagationTrace,
    seeds: &SparseDepth,
    affinity: &AffinityField,
    grad_output: &[f32],
) -> PropagationGrad {
    let (h, w) = (trace.height, trace.width);
    let n = h * w;
    assert_eq!(grad_output.len(), n);
    let r = affinity.radius() as isize;
    let c = affinity.stencil();
    let center = affinity.center();
    let d0 = &trace.states[0];

    let mut grad_aff = vec![0.0f32; affinity.weights.len()];
    let mut grad_init = vec![0.0f32; n];
    let mut g = grad_output.to_vec();
    let mut g_prev = vec![0.0f32; n];
    for t in (1..trace.states.len()).rev() {
        if trace.seed_reinjection {
            for (gi, &s) in g.iter_mut().zip(seeds.values()) {
                if s > 0.0 {
                    *gi = 0.0;
                }
            }
        }
        let prev = &trace.states[t - 1];
        g_prev.fill(0.0);
        {
            let wc = affinity.channel(center);
            let ga = &mut grad_aff[center * n..(center + 1) * n];
            for i in 0..n {
                ga[i] += g[i] * d0[i];
                grad_init[i] += g[i] * wc[i];
            }
        }
        for k in 0..c * c {
            if k == center {
                continue;
            }
            let dy = (k / c) as isize - r;
            let dx = (k % c) as isize - r;
            let wk = affinity.channel(k);
            let ga = &mut grad_aff[k * n..(k + 1) * n];
            for y in 0..h {
                let ys = clamp_index(y as isize + dy, h);
                for x in 0..w {
                    let xs = clamp_index(x as isize + dx, w);
                    let i = y * w + x;
                    let j = ys * w + xs;
                    ga[i] += g[i] * prev[j];
                    g_prev[j] += g[i] * wk[i];
                }
            }
        }
        std::mem::swap(&mut g, &mut g_prev);
    }
    for (gi, v) in grad_init.iter_mut().zip(&g) {
        *gi += v;
    }
    PropagationGrad {
        initial: grad_init,
        affinity: grad_aff,
    }
}

#[inline]
fn clamp_index(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

fn reinject(state: &mut [f32], seeds: &[f32]) {
    for (v, &s) in state.iter_mut().zip(seeds) {
        if s > 0.0 {
            *v = s;
        }
    }
}

/// One Jacobi step. Per pixel, the accumulation order is the center term
/// first, then the remaining channels in ascending order.
fn step(prev: &[f32], d0: &[f32], affinity: &AffinityField, out: &mut [f32], exec: Execution) {
    let (h, w) = affinity.shape();
    let c = affinity.stencil();
    let r = affinity.radius() as isize;
    let center = affinity.center();
    exec.for_each_row(out, w, |y, row| {
        let base = y * w;
        let wc = &affinity.channel(center)[base..base + w];
        for x in 0..w {
            row[x] = wc[x] * d0[base + x];
        }
        for k in 0..c * c {
            if k == center {
                continue;
            }
            let dy = (k / c) as isize - r;
            let dx = (k % c) as isize - r;
            let ys = clamp_index(y as isize + dy, h);
            let src = &prev[ys * w..ys * w + w];
            let wk = &affinity.channel(k)[base..base + w];
            // interior columns need no clamping
            let lo = (-dx).max(0) as usize;
            let hi = (w as isize - dx.max(0)).max(lo as isize) as usize;
            for x in 0..lo.min(w) {
                row[x] += wk[x] * src[clamp_index(x as isize + dx, w)];
            }
            for x in lo..hi {
                row[x] += wk[x] * src[(x as isize + dx) as usize];
            }
            for x in hi.max(lo.min(w))..w {
                row[x] += wk[x] * src[clamp_index(x as isize + dx, w)];
            }
        }
    });
}

/// Direct per-pixel loop with the same contract as [`propagate`]. Kept as an
/// oracle for tests and benchmarks.
pub mod reference {
    use super::*;

    pub fn propagate_reference(
        initial: &DepthRaster,
        seeds: &SparseDepth,
        affinity: &AffinityField,
        cfg: &PropagationConfig,
    ) -> Result<DepthRaster> {
        check_inputs(initial, seeds, affinity)?;
        let (h, w) = initial.shape();
        let d0 = initial.values();
        let center = affinity.center();
        let mut prev = d0.to_vec();
        for _ in 0..cfg.n_steps {
            let mut next = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let mut acc = affinity.weight(center, i) * d0[i];
                    for k in 0..affinity.channels() {
                        if k == center {
                            continue;
                        }
                        let (dy, dx) = affinity.offset(k);
                        let ys = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xs = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += affinity.weight(k, i) * prev[ys * w + xs];
                    }
                    next[i] = if cfg.seed_reinjection && seeds.values()[i] > 0.0 {
                        seeds.values()[i]
                    } else {
                        acc
                    };
                }
            }
            prev = next;
        }
        DepthRaster::new(h, w, prev)
    }
}
