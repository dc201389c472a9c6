//! Conv + optional layer norm + optional leaky ReLU, the only building block
//! the networks use.

use crate::conv::{Conv2d, ConvCache};
use crate::params::{grad_slice, ParamId, ParamKind, ParamStore};
use crate::tensor::{leaky_relu_backward, leaky_relu_inplace, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Per-sample normalization over all of (C, H, W) followed by a per-channel
/// affine map. Keeps feature scale fixed however the weights before it grow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.norm.gamma"), vec![channels], ParamKind::Weight, vec![1.0; channels]);
        let beta = store.add(format!("{name}.norm.beta"), vec![channels], ParamKind::Bias, vec![0.0; channels]);
        Self { gamma, beta }
    }

    /// Normalizes `x` in place into the affine output; returns the
    /// pre-affine values and `1 / sigma`.
    fn forward(&self, store: &ParamStore, x: &mut Tensor) -> (Vec<f32>, f64) {
        let n = x.data.len() as f64;
        let mean = x.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        let xhat: Vec<f32> = x.data.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect();
        let (gamma, beta) = (store.get(self.gamma), store.get(self.beta));
        let plane = x.plane_len();
        for (i, v) in x.data.iter_mut().enumerate() {
            let c = i / plane;
            *v = gamma[c] * xhat[i] + beta[c];
        }
        (xhat, inv)
    }

    fn backward(&self, store: &ParamStore, xhat: &[f32], inv: f64, grad: &mut Tensor, grads: &mut [f32]) {
        let plane = grad.plane_len();
        let channels = grad.channels;
        let mut dgamma = vec![0.0f64; channels];
        let mut dbeta = vec![0.0f64; channels];
        for (i, &g) in grad.data.iter().enumerate() {
            dgamma[i / plane] += g as f64 * xhat[i] as f64;
            dbeta[i / plane] += g as f64;
        }
        for (d, v) in grad_slice(store, grads, self.gamma).iter_mut().zip(&dgamma) {
            *d += *v as f32;
        }
        for (d, v) in grad_slice(store, grads, self.beta).iter_mut().zip(&dbeta) {
            *d += *v as f32;
        }
        let gamma = store.get(self.gamma);
        let dxhat: Vec<f64> = grad
            .data
            .iter()
            .enumerate()
            .map(|(i, &g)| g as f64 * gamma[i / plane] as f64)
            .collect();
        let n = dxhat.len() as f64;
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xhat).map(|(d, &x)| d * x as f64).sum::<f64>() / n;
        for (i, v) in grad.data.iter_mut().enumerate() {
            *v = (inv * (dxhat[i] - mean_d - xhat[i] as f64 * mean_dx)) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub conv: Conv2d,
    pub norm: Option<LayerNorm>,
    pub activate: bool,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    conv: ConvCache,
    norm: Option<(Vec<f32>, f64)>,
    /// Post-activation output.
    output: Tensor,
}

impl BlockCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Block {
    pub fn new(conv: Conv2d, activate: bool) -> Self {
        Self {
            conv,
            norm: None,
            activate,
        }
    }

    pub fn normalized(store: &mut ParamStore, name: &str, conv: Conv2d, activate: bool) -> Self {
        Self {
            norm: Some(LayerNorm::new(store, name, conv.out_channels)),
            conv,
            activate,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        self.forward_cached(store, x).output
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &Tensor) -> BlockCache {
        let (mut y, conv) = self.conv.forward(store, x);
        let norm = self.norm.map(|n| n.forward(store, &mut y));
        if self.activate {
            leaky_relu_inplace(&mut y);
        }
        BlockCache { conv, norm, output: y }
    }

    /// `grad` is the gradient with respect to the block output; it is
    /// consumed (the activation backward happens in place).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BlockCache,
        mut grad: Tensor,
        grads: &mut [f32],
        need_input: bool,
    ) -> Option<Tensor> {
        if self.activate {
            leaky_relu_backward(&cache.output, &mut grad);
        }
        if let (Some(norm), Some((xhat, inv))) = (&self.norm, &cache.norm) {
            norm.backward(store, xhat, *inv, &mut grad, grads);
        }
        self.conv.backward(store, &cache.conv, &grad, grads, need_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, Block, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3, 1);
        let block = Block::normalized(&mut store, "c", conv, true);
        for v in store.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let x = Tensor::from_vec(2, 4, 5, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = Tensor::from_vec(3, 4, 5, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect());
        (store, block, x, w)
    }

    fn objective(store: &ParamStore, block: &Block, x: &Tensor, w: &Tensor) -> f64 {
        let y = block.forward(store, x);
        y.data.iter().zip(&w.data).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn normalized_output_has_unit_scale() {
        let (store, block, x, _) = setup();
        let mut scaled = x.clone();
        scaled.data.iter_mut().for_each(|v| *v *= 1000.0);
        let a = block.forward(&store, &x);
        let b = block.forward(&store, &scaled);
        // conv biases break exact invariance; large inputs drown them out
        let spread = b.data.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        assert!(spread < 10.0, "{spread}");
        assert!(a.is_finite());
    }

    #[test]
    fn normalized_block_gradients_match_finite_differences() {
        let (mut store, block, x, w) = setup();
        let cache = block.forward_cached(&store, &x);
        let mut grads = store.zero_grad();
        let gx = block.backward(&store, &cache, w.clone(), &mut grads, true).unwrap();
        let eps = 1e-3f32;
        let check = |analytic: f32, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * eps as f64);
            let err = (analytic as f64 - numeric).abs() / numeric.abs().max(1e-2);
            assert!(err < 2e-2, "analytic {analytic} numeric {numeric}");
        };
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += eps;
            xm.data[i] -= eps;
            check(gx.data[i], objective(&store, &block, &xp, &w), objective(&store, &block, &xm, &w));
        }
        for i in 0..store.len() {
            let v = store.values()[i];
            store.values_mut()[i] = v + eps;
            let plus = objective(&store, &block, &x, &w);
            store.values_mut()[i] = v - eps;
            let minus = objective(&store, &block, &x, &w);
            store.values_mut()[i] = v;
            check(grads[i], plus, minus);
        }
    }
}
