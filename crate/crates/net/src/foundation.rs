//! Toy relative-depth backbone: a 4-level convolutional encoder-decoder.
//!
//! Its encoder outputs double as the image feature pyramid handed to the
//! affinity decoder. Parameters are split into weights and biases so the
//! backbone can be bias-tuned with every weight frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use depthprompt_core::{DepthRaster, ImageRaster};

use crate::block::{Block, BlockCache};
use crate::conv::Conv2d;
use crate::error::{NetError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{concat, sigmoid, softplus, split_channels, upsample2, upsample2_backward, Tensor};

/// Keeps the relative depth strictly positive.
pub const OUTPUT_FLOOR: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel width at scales 1/1, 1/2, 1/4, 1/8.
    pub widths: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [8, 16, 32, 96],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    enc0: Block,
    enc1a: Block,
    enc1b: Block,
    enc2a: Block,
    enc2b: Block,
    enc3a: Block,
    enc3b: Block,
    dec2: Block,
    dec1: Block,
    dec0: Block,
    head: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoundationModel {
    config: BackboneConfig,
    store: ParamStore,
    layers: Layers,
}

/// Activations kept for the backward pass.
pub struct BackboneCache {
    enc0: BlockCache,
    enc1a: BlockCache,
    enc1b: BlockCache,
    enc2a: BlockCache,
    enc2b: BlockCache,
    enc3a: BlockCache,
    enc3b: BlockCache,
    dec2: BlockCache,
    dec1: BlockCache,
    dec0: BlockCache,
    head: BlockCache,
}

pub struct BackboneOutput {
    /// Strictly positive relative depth, `H * W`.
    pub relative: Vec<f32>,
    pub pyramid: FeaturePyramid,
    pub cache: BackboneCache,
}

impl FoundationModel {
    /// Fresh model with seeded random weights and zero biases. Every
    /// parameter starts trainable.
    pub fn new(config: BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c0, c1, c2, c3] = config.widths;
        let mut conv = |name: &str, cin, cout, stride| {
            Block::new(Conv2d::new(&mut store, &mut rng, name, cin, cout, 3, stride), true)
        };
        let enc0 = conv("enc0", config.in_channels, c0, 1);
        let enc1a = conv("enc1a", c0, c1, 2);
        let enc1b = conv("enc1b", c1, c1, 1);
        let enc2a = conv("enc2a", c1, c2, 2);
        let enc2b = conv("enc2b", c2, c2, 1);
        let enc3a = conv("enc3a", c2, c3, 2);
        let enc3b = conv("enc3b", c3, c3, 1);
        let dec2 = conv("dec2", c3 + c2, c2, 1);
        let dec1 = conv("dec1", c2 + c1, c1, 1);
        let dec0 = conv("dec0", c1 + c0, c0, 1);
        let mut head = conv("head", c0, 1, 1);
        head.activate = false;
        Self {
            config,
            store,
            layers: Layers {
                enc0,
                enc1a,
                enc1b,
                enc2a,
                enc2b,
                enc3a,
                enc3b,
                dec2,
                dec1,
                dec0,
                head,
            },
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.len()
    }

    /// Share of backbone parameters the optimizer may touch.
    pub fn trainable_fraction(&self) -> f64 {
        self.store.trainable_count() as f64 / self.store.len() as f64
    }

    pub fn forward(&self, image: &Tensor) -> BackboneOutput {
        let s = &self.store;
        let l = &self.layers;
        let enc0 = l.enc0.forward_cached(s, image);
        let enc1a = l.enc1a.forward_cached(s, enc0.output());
        let enc1b = l.enc1b.forward_cached(s, enc1a.output());
        let enc2a = l.enc2a.forward_cached(s, enc1b.output());
        let enc2b = l.enc2b.forward_cached(s, enc2a.output());
        let enc3a = l.enc3a.forward_cached(s, enc2b.output());
        let enc3b = l.enc3b.forward_cached(s, enc3a.output());

        let (e0, e1, e2, e3) = (enc0.output(), enc1b.output(), enc2b.output(), enc3b.output());
        let dec2 = l.dec2.forward_cached(s, &concat(&[&upsample2(e3, e2.height, e2.width), e2]));
        let dec1 = l.dec1.forward_cached(s, &concat(&[&upsample2(dec2.output(), e1.height, e1.width), e1]));
        let dec0 = l.dec0.forward_cached(s, &concat(&[&upsample2(dec1.output(), e0.height, e0.width), e0]));
        let head = l.head.forward_cached(s, dec0.output());
        let relative = head.output().data.iter().map(|&v| softplus(v) + OUTPUT_FLOOR).collect();
        let pyramid = FeaturePyramid::new(vec![e0.clone(), e1.clone(), e2.clone(), e3.clone()]);
        BackboneOutput {
            relative,
            pyramid,
            cache: BackboneCache {
                enc0,
                enc1a,
                enc1b,
                enc2a,
                enc2b,
                enc3a,
                enc3b,
                dec2,
                dec1,
                dec0,
                head,
            },
        }
    }

    /// Accumulates gradients of trainable parameters into `grads` given the
    /// loss gradient with respect to the relative depth and (optionally) each
    /// pyramid level.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        grad_relative: &[f32],
        grad_pyramid: &[Option<Tensor>],
        grads: &mut [f32],
    ) {
        let s = &self.store;
        let l = &self.layers;
        let [c0, c1, c2, c3] = self.config.widths;
        let pyr = |i: usize| grad_pyramid.get(i).and_then(|g| g.as_ref());

        let head_pre = cache.head.output();
        let g_head = Tensor::from_vec(
            1,
            head_pre.height,
            head_pre.width,
            grad_relative
                .iter()
                .zip(&head_pre.data)
                .map(|(g, &x)| g * sigmoid(x))
                .collect(),
        );
        let g_dec0 = l.head.backward(s, &cache.head, g_head, grads, true).unwrap();
        let g_cat0 = l.dec0.backward(s, &cache.dec0, g_dec0, grads, true).unwrap();
        let mut parts = split_channels(&g_cat0, &[c1, c0]).into_iter();
        let (g_up1, mut g_e0) = (parts.next().unwrap(), parts.next().unwrap());
        let d1 = cache.dec1.output();
        let g_dec1 = upsample2_backward(&g_up1, d1.height, d1.width);
        let g_cat1 = l.dec1.backward(s, &cache.dec1, g_dec1, grads, true).unwrap();
        let mut parts = split_channels(&g_cat1, &[c2, c1]).into_iter();
        let (g_up2, mut g_e1) = (parts.next().unwrap(), parts.next().unwrap());
        let d2 = cache.dec2.output();
        let g_dec2 = upsample2_backward(&g_up2, d2.height, d2.width);
        let g_cat2 = l.dec2.backward(s, &cache.dec2, g_dec2, grads, true).unwrap();
        let mut parts = split_channels(&g_cat2, &[c3, c2]).into_iter();
        let (g_up3, mut g_e2) = (parts.next().unwrap(), parts.next().unwrap());
        let e3 = cache.enc3b.output();
        let mut g_e3 = upsample2_backward(&g_up3, e3.height, e3.width);

        if let Some(g) = pyr(3) {
            g_e3.add_assign(g);
        }
        let g = l.enc3b.backward(s, &cache.enc3b, g_e3, grads, true).unwrap();
        let g = l.enc3a.backward(s, &cache.enc3a, g, grads, true).unwrap();
        g_e2.add_assign(&g);
        if let Some(g) = pyr(2) {
            g_e2.add_assign(g);
        }
        let g = l.enc2b.backward(s, &cache.enc2b, g_e2, grads, true).unwrap();
        let g = l.enc2a.backward(s, &cache.enc2a, g, grads, true).unwrap();
        g_e1.add_assign(&g);
        if let Some(g) = pyr(1) {
            g_e1.add_assign(g);
        }
        let g = l.enc1b.backward(s, &cache.enc1b, g_e1, grads, true).unwrap();
        let g = l.enc1a.backward(s, &cache.enc1a, g, grads, true).unwrap();
        g_e0.add_assign(&g);
        if let Some(g) = pyr(0) {
            g_e0.add_assign(g);
        }
        l.enc0.backward(s, &cache.enc0, g_e0, grads, false);
    }
}

pub fn image_tensor(image: &ImageRaster) -> Tensor {
    Tensor::from_vec(image.channels(), image.height(), image.width(), image.values().to_vec())
}

/// Relative depth and image feature pyramid for one image.
pub fn predict_relative(image: &ImageRaster, model: &FoundationModel) -> Result<(DepthRaster, FeaturePyramid)> {
    if image.channels() != model.config.in_channels {
        return Err(NetError::Config(format!(
            "backbone expects {} image channels, got {}",
            model.config.in_channels,
            image.channels()
        )));
    }
    let out = model.forward(&image_tensor(image));
    let depth = DepthRaster::new(image.height(), image.width(), out.relative)?;
    Ok((depth, out.pyramid))
}

/// Freezes every weight and leaves only bias terms trainable.
pub fn apply_bias_tuning(mut model: FoundationModel) -> Result<FoundationModel> {
    restrict_to_biases(&mut model.store)?;
    Ok(model)
}

/// Store-level half of [`apply_bias_tuning`].
pub fn restrict_to_biases(store: &mut ParamStore) -> Result<()> {
    if !store.entries().iter().any(|e| e.kind == ParamKind::Bias) {
        return Err(NetError::Config("model has no bias terms to tune".into()));
    }
    store.set_trainable(|e| e.kind == ParamKind::Bias);
    Ok(())
}
