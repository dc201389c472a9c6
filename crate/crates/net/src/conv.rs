//! 2-D convolution (zero padding `k / 2`) via im2col + SGEMM.

use rand::Rng;

use crate::params::{grad_slice, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Saved im2col matrix for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    /// Registers weights (He-uniform) and zero biases under `name`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f32).sqrt();
        let init = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            ParamKind::Weight,
            init,
        );
        let bias = store.add(
            format!("{name}.bias"),
            vec![out_channels],
            ParamKind::Bias,
            vec![0.0; out_channels],
        );
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, store: &ParamStore, input: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let (out_h, out_w) = self.output_size(input.height, input.width);
        let cols = self.im2col(input, out_h, out_w);
        let p = out_h * out_w;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(self.out_channels, out_h, out_w);
        let bias = store.get(self.bias);
        for (co, &b) in bias.iter().enumerate() {
            out.data[co * p..(co + 1) * p].fill(b);
        }
        let w = store.get(self.weight);
        // out[co, p] += W[co, j] * cols[j, p]
        unsafe {
            matrixmultiply::sgemm(
                self.out_channels,
                kdim,
                p,
                1.0,
                w.as_ptr(),
                kdim as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        (
            out,
            ConvCache {
                cols,
                in_h: input.height,
                in_w: input.width,
                out_h,
                out_w,
            },
        )
    }

    /// Accumulates parameter gradients (only for trainable entries) into
    /// `grads` and returns the input gradient when `need_input` is set.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        grad_out: &Tensor,
        grads: &mut [f32],
        need_input: bool,
    ) -> Option<Tensor> {
        let p = cache.out_h * cache.out_w;
        let kdim = self.in_channels * self.kernel * self.kernel;
        assert_eq!(grad_out.data.len(), self.out_channels * p);

        if store.is_trainable(self.bias) {
            let gb = grad_slice(store, grads, self.bias);
            for (co, g) in gb.iter_mut().enumerate() {
                *g += grad_out.data[co * p..(co + 1) * p].iter().sum::<f32>();
            }
        }
        if store.is_trainable(self.weight) {
            let gw = grad_slice(store, grads, self.weight);
            // dW[co, j] += dOut[co, p] * cols[j, p]
            unsafe {
                matrixmultiply::sgemm(
                    self.out_channels,
                    p,
                    kdim,
                    1.0,
                    grad_out.data.as_ptr(),
                    p as isize,
                    1,
                    cache.cols.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
        }
        if !need_input {
            return None;
        }
        let w = store.get(self.weight);
        let mut dcols = vec![0.0f32; kdim * p];
        // dcols[j, p] = W[co, j] * dOut[co, p]
        unsafe {
            matrixmultiply::sgemm(
                kdim,
                self.out_channels,
                p,
                1.0,
                w.as_ptr(),
                1,
                kdim as isize,
                grad_out.data.as_ptr(),
                p as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        Some(self.col2im(&dcols, cache))
    }

    fn im2col(&self, input: &Tensor, out_h: usize, out_w: usize) -> Vec<f32> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let s = self.stride;
        let p = out_h * out_w;
        let (h, w) = (input.height as isize, input.width as isize);
        let mut cols = vec![0.0f32; self.in_channels * k * k * p];
        for ci in 0..self.in_channels {
            let plane = input.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..out_h {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                        let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f32], cache: &ConvCache) -> Tensor {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let s = self.stride;
        let (out_h, out_w) = (cache.out_h, cache.out_w);
        let p = out_h * out_w;
        let (h, w) = (cache.in_h as isize, cache.in_w as isize);
        let mut grad = Tensor::zeros(self.in_channels, cache.in_h, cache.in_w);
        let plane_len = cache.in_h * cache.in_w;
        for ci in 0..self.in_channels {
            let plane = &mut grad.data[ci * plane_len..(ci + 1) * plane_len];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..out_h {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                        for ox in 0..out_w {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += src[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution, no im2col.
    fn naive(conv: &Conv2d, store: &ParamStore, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.output_size(x.height, x.width);
        let k = conv.kernel as isize;
        let pad = k / 2;
        let w = store.get(conv.weight);
        let b = store.get(conv.bias);
        let mut out = Tensor::zeros(conv.out_channels, oh, ow);
        for co in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co] as f64;
                    for ci in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky - pad;
                                let ix = (ox * conv.stride) as isize + kx - pad;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let wi = ((co * conv.in_channels + ci) * conv.kernel + ky as usize)
                                    * conv.kernel
                                    + kx as usize;
                                acc += w[wi] as f64
                                    * x.data[(ci * x.height + iy as usize) * x.width + ix as usize] as f64;
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    fn setup(kernel: usize, stride: usize) -> (ParamStore, Conv2d, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 3, 4, kernel, stride);
        let bias_id = conv.bias;
        let off = store.entry(bias_id).offset;
        for (i, v) in store.values_mut()[off..off + 4].iter_mut().enumerate() {
            *v = 0.1 * i as f32;
        }
        let x = Tensor::from_vec(3, 5, 6, (0..90).map(|_| rng.random_range(-1.0..1.0)).collect());
        (store, conv, x)
    }

    #[test]
    fn matches_naive_convolution() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let (store, conv, x) = setup(k, s);
            let (y, _) = conv.forward(&store, &x);
            let y_ref = naive(&conv, &store, &x);
            assert_eq!(y.shape(), y_ref.shape());
            for (a, b) in y.data.iter().zip(&y_ref.data) {
                assert!((a - b).abs() < 1e-5, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, s) in [(3, 1), (3, 2)] {
            let (mut store, conv, x) = setup(k, s);
            // loss = sum(y * r) for a fixed random r
            let (y, cache) = conv.forward(&store, &x);
            let r: Vec<f32> = (0..y.data.len()).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
            let gy = Tensor::from_vec(y.channels, y.height, y.width, r.clone());
            let mut grads = store.zero_grad();
            let gx = conv.backward(&store, &cache, &gy, &mut grads, true).unwrap();
            let loss = |store: &ParamStore, x: &Tensor| -> f64 {
                naive(&conv, store, x)
                    .data
                    .iter()
                    .zip(&r)
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum()
            };
            let eps = 1e-2f32;
            for i in (0..store.len()).step_by(7) {
                let orig = store.values()[i];
                store.values_mut()[i] = orig + eps;
                let lp = loss(&store, &x);
                store.values_mut()[i] = orig - eps;
                let lm = loss(&store, &x);
                store.values_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps as f64);
                assert!((fd - grads[i] as f64).abs() < 1e-3, "param {i}: {fd} vs {}", grads[i]);
            }
            let mut xp = x.clone();
            for i in (0..x.data.len()).step_by(5) {
                let orig = x.data[i];
                xp.data[i] = orig + eps;
                let lp = loss(&store, &xp);
                xp.data[i] = orig - eps;
                let lm = loss(&store, &xp);
                xp.data[i] = orig;
                let fd = (lp - lm) / (2.0 * eps as f64);
                assert!((fd - gx.data[i] as f64).abs() < 1e-3, "input {i}: {fd} vs {}", gx.data[i]);
            }
        }
    }

    #[test]
    fn frozen_weights_get_no_gradient() {
        let (mut store, conv, x) = setup(3, 1);
        store.set_trainable(|e| e.kind == ParamKind::Bias);
        let (y, cache) = conv.forward(&store, &x);
        let gy = Tensor::from_vec(y.channels, y.height, y.width, vec![1.0; y.data.len()]);
        let mut grads = store.zero_grad();
        conv.backward(&store, &cache, &gy, &mut grads, false);
        let w = store.entry(conv.weight);
        assert!(grads[w.offset..w.offset + w.len].iter().all(|g| *g == 0.0));
        let b = store.entry(conv.bias);
        assert!(grads[b.offset..b.offset + b.len].iter().all(|g| *g == 30.0));
    }
}
