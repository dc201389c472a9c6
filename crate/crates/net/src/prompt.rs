//! Depth prompt module: a sparse-depth encoder and an affinity decoder that
//! fuses prompt features with the backbone's image pyramid.
//!
//! The sparse map enters as two channels, `(depth / depth_scale, valid)`, so
//! the network can tell a missing reading from a near-zero one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use depthprompt_core::{AffinityField, SparseDepth};

use crate::block::{Block, BlockCache};
use crate::conv::Conv2d;
use crate::error::{NetError, Result};
use crate::foundation::BackboneConfig;
use crate::params::ParamStore;
use crate::pyramid::FeaturePyramid;
use crate::tensor::{concat, split_channels, upsample2, upsample2_backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Encoder widths at scales 1/1, 1/2, 1/4, 1/8.
    pub encoder_widths: [usize; 4],
    /// Decoder widths at scales 1/1, 1/2, 1/4, 1/8.
    pub decoder_widths: [usize; 4],
    /// Stencil size `C`; the decoder emits `C^2` channels.
    pub stencil: usize,
    /// Without the prompt, the decoder sees image features only.
    pub use_prompt: bool,
    /// Meters mapped to 1.0 at the encoder input.
    pub depth_scale: f32,
    /// Raw head bias on the center channel at initialization.
    pub center_bias: f32,
    /// Raw head bias on every neighbor channel at initialization.
    pub neighbor_bias: f32,
    /// Layer norm after every encoder conv. Without it the encoder's deep
    /// features can grow until the sparse layout no longer shows in them.
    pub encoder_norm: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [8, 16, 16, 32],
            decoder_widths: [8, 16, 16, 32],
            stencil: depthprompt_core::propagation::DEFAULT_STENCIL,
            use_prompt: true,
            depth_scale: 10.0,
            center_bias: 1.0,
            neighbor_bias: 0.05,
            encoder_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    l0: Block,
    l1a: Block,
    l1b: Block,
    l2a: Block,
    l2b: Block,
    l3a: Block,
    l3b: Block,
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    d3: Block,
    d2: Block,
    d1: Block,
    d0: Block,
    head: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptModule {
    config: PromptConfig,
    image_widths: [usize; 4],
    store: ParamStore,
    encoder: Option<Encoder>,
    decoder: Decoder,
}

pub struct EncoderCache {
    l0: BlockCache,
    l1a: BlockCache,
    l1b: BlockCache,
    l2a: BlockCache,
    l2b: BlockCache,
    l3a: BlockCache,
    l3b: BlockCache,
}

pub struct DecoderCache {
    d3: BlockCache,
    d2: BlockCache,
    d1: BlockCache,
    d0: BlockCache,
    head: BlockCache,
}

impl PromptModule {
    pub fn new(config: PromptConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        if config.stencil < 3 || config.stencil.is_multiple_of(2) {
            return Err(NetError::Config(format!(
                "stencil size must be odd and >= 3, got {}",
                config.stencil
            )));
        }
        if !(config.depth_scale > 0.0) {
            return Err(NetError::Config("depth_scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let img = backbone.widths;
        let pe = if config.use_prompt { config.encoder_widths } else { [0; 4] };
        let dw = config.decoder_widths;
        let mut conv = |store: &mut ParamStore, name: &str, cin, cout, k, stride| {
            Block::new(Conv2d::new(store, &mut rng, name, cin, cout, k, stride), true)
        };
        let mut enc = |store: &mut ParamStore, name: &str, cin, cout, stride| {
            let block = conv(store, name, cin, cout, 3, stride);
            if config.encoder_norm {
                Block::normalized(store, name, block.conv, true)
            } else {
                block
            }
        };
        let encoder = config.use_prompt.then(|| Encoder {
            l0: enc(&mut store, "enc0", 2, pe[0], 1),
            l1a: enc(&mut store, "enc1a", pe[0], pe[1], 2),
            l1b: enc(&mut store, "enc1b", pe[1], pe[1], 1),
            l2a: enc(&mut store, "enc2a", pe[1], pe[2], 2),
            l2b: enc(&mut store, "enc2b", pe[2], pe[2], 1),
            l3a: enc(&mut store, "enc3a", pe[2], pe[3], 2),
            l3b: enc(&mut store, "enc3b", pe[3], pe[3], 1),
        });
        let channels = config.stencil * config.stencil;
        let d3 = conv(&mut store, "dec3", pe[3] + img[3], dw[3], 3, 1);
        let d2 = conv(&mut store, "dec2", dw[3] + pe[2] + img[2], dw[2], 3, 1);
        let d1 = conv(&mut store, "dec1", dw[2] + pe[1] + img[1], dw[1], 3, 1);
        let d0 = conv(&mut store, "dec0", dw[1] + pe[0] + img[0], dw[0], 3, 1);
        let mut head = conv(&mut store, "head", dw[0], channels, 1, 1);
        head.activate = false;

        // Start close to a mild, center-weighted diffusion.
        let w = store.entry(head.conv.weight).clone();
        for v in &mut store.values_mut()[w.offset..w.offset + w.len] {
            *v *= 0.1;
        }
        let b = store.entry(head.conv.bias).clone();
        let center = (config.stencil / 2) * config.stencil + config.stencil / 2;
        for (k, v) in store.values_mut()[b.offset..b.offset + b.len].iter_mut().enumerate() {
            *v = if k == center { config.center_bias } else { config.neighbor_bias };
        }

        Ok(Self {
            config,
            image_widths: img,
            store,
            encoder,
            decoder: Decoder { d3, d2, d1, d0, head },
        })
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Decoder output channel count, `C^2`.
    pub fn affinity_channels(&self) -> usize {
        self.config.stencil * self.config.stencil
    }

    /// Two-channel encoder input. Pixels with `valid[i] == false` contribute
    /// zeros in both channels whatever `values[i]` holds.
    pub fn input_tensor(&self, height: usize, width: usize, values: &[f32], valid: &[bool]) -> Tensor {
        let n = height * width;
        assert_eq!(values.len(), n);
        assert_eq!(valid.len(), n);
        let mut data = vec![0.0f32; 2 * n];
        for i in 0..n {
            if valid[i] {
                data[i] = values[i] / self.config.depth_scale;
                data[n + i] = 1.0;
            }
        }
        Tensor::from_vec(2, height, width, data)
    }

    pub fn encode_masked(&self, height: usize, width: usize, values: &[f32], valid: &[bool]) -> Option<(FeaturePyramid, EncoderCache)> {
        let enc = self.encoder.as_ref()?;
        let x = self.input_tensor(height, width, values, valid);
        let s = &self.store;
        let l0 = enc.l0.forward_cached(s, &x);
        let l1a = enc.l1a.forward_cached(s, l0.output());
        let l1b = enc.l1b.forward_cached(s, l1a.output());
        let l2a = enc.l2a.forward_cached(s, l1b.output());
        let l2b = enc.l2b.forward_cached(s, l2a.output());
        let l3a = enc.l3a.forward_cached(s, l2b.output());
        let l3b = enc.l3b.forward_cached(s, l3a.output());
        let pyramid = FeaturePyramid::new(vec![
            l0.output().clone(),
            l1b.output().clone(),
            l2b.output().clone(),
            l3b.output().clone(),
        ]);
        Some((
            pyramid,
            EncoderCache {
                l0,
                l1a,
                l1b,
                l2a,
                l2b,
                l3a,
                l3b,
            },
        ))
    }

    pub fn encoder_backward(&self, cache: &EncoderCache, grad: &[Tensor], grads: &mut [f32]) {
        let Some(enc) = self.encoder.as_ref() else {
            return;
        };
        let s = &self.store;
        let g = enc.l3b.backward(s, &cache.l3b, grad[3].clone(), grads, true).unwrap();
        let mut g2 = enc.l3a.backward(s, &cache.l3a, g, grads, true).unwrap();
        g2.add_assign(&grad[2]);
        let g = enc.l2b.backward(s, &cache.l2b, g2, grads, true).unwrap();
        let mut g1 = enc.l2a.backward(s, &cache.l2a, g, grads, true).unwrap();
        g1.add_assign(&grad[1]);
        let g = enc.l1b.backward(s, &cache.l1b, g1, grads, true).unwrap();
        let mut g0 = enc.l1a.backward(s, &cache.l1a, g, grads, true).unwrap();
        g0.add_assign(&grad[0]);
        enc.l0.backward(s, &cache.l0, g0, grads, false);
    }

    fn check_pyramids(&self, prompt: Option<&FeaturePyramid>, image: &FeaturePyramid) -> Result<()> {
        if image.len() != 4 {
            return Err(depthprompt_core::Error::Contract(format!(
                "image pyramid needs 4 levels, got {}",
                image.len()
            ))
            .into());
        }
        for (k, level) in image.levels.iter().enumerate() {
            if level.channels != self.image_widths[k] {
                return Err(depthprompt_core::Error::Contract(format!(
                    "image level {k} has {} channels, decoder expects {}",
                    level.channels, self.image_widths[k]
                ))
                .into());
            }
        }
        match (prompt, self.config.use_prompt) {
            (Some(p), true) => {
                if p.len() != 4 {
                    return Err(depthprompt_core::Error::Contract("prompt pyramid needs 4 levels".into()).into());
                }
                for (k, (a, b)) in p.levels.iter().zip(&image.levels).enumerate() {
                    if (a.height, a.width) != (b.height, b.width) {
                        return Err(depthprompt_core::Error::Contract(format!(
                            "level {k}: prompt {}x{} vs image {}x{}",
                            a.height, a.width, b.height, b.width
                        ))
                        .into());
                    }
                }
                Ok(())
            }
            (None, false) => Ok(()),
            (None, true) => Err(depthprompt_core::Error::Contract("decoder needs a prompt pyramid".into()).into()),
            (Some(_), false) => Err(depthprompt_core::Error::Contract(
                "module was built without a prompt encoder".into(),
            )
            .into()),
        }
    }

    /// Raw `C^2`-channel affinity at full resolution.
    pub fn decode(&self, prompt: Option<&FeaturePyramid>, image: &FeaturePyramid) -> Result<(Tensor, DecoderCache)> {
        self.check_pyramids(prompt, image)?;
        let s = &self.store;
        let d = &self.decoder;
        let with = |k: usize, parts: Vec<&Tensor>| -> Tensor {
            let mut all = parts;
            if let Some(p) = prompt {
                all.push(&p.levels[k]);
            }
            all.push(&image.levels[k]);
            concat(&all)
        };
        let d3 = d.d3.forward_cached(s, &with(3, vec![]));
        let lvl = |k: usize| (image.levels[k].height, image.levels[k].width);
        let (h2, w2) = lvl(2);
        let d2 = d.d2.forward_cached(s, &with(2, vec![&upsample2(d3.output(), h2, w2)]));
        let (h1, w1) = lvl(1);
        let d1 = d.d1.forward_cached(s, &with(1, vec![&upsample2(d2.output(), h1, w1)]));
        let (h0, w0) = lvl(0);
        let d0 = d.d0.forward_cached(s, &with(0, vec![&upsample2(d1.output(), h0, w0)]));
        let head = d.head.forward_cached(s, d0.output());
        let out = head.output().clone();
        Ok((out, DecoderCache { d3, d2, d1, d0, head }))
    }

    /// Backward through the decoder. Returns gradients for the prompt
    /// pyramid (empty without a prompt) and the image pyramid.
    pub fn decoder_backward(&self, cache: &DecoderCache, grad_raw: Tensor, grads: &mut [f32]) -> (Vec<Tensor>, Vec<Tensor>) {
        let s = &self.store;
        let d = &self.decoder;
        let pe = if self.config.use_prompt { self.config.encoder_widths } else { [0; 4] };
        let img = self.image_widths;
        let dw = self.config.decoder_widths;
        let mut g_prompt = vec![Tensor::zeros(0, 0, 0); 4];
        let mut g_image = vec![Tensor::zeros(0, 0, 0); 4];

        let g = d.head.backward(s, &cache.head, grad_raw, grads, true).unwrap();
        let g = d.d0.backward(s, &cache.d0, g, grads, true).unwrap();
        let mut parts = split_channels(&g, &[dw[1], pe[0], img[0]]).into_iter();
        let g_up = parts.next().unwrap();
        g_prompt[0] = parts.next().unwrap();
        g_image[0] = parts.next().unwrap();
        let o = cache.d1.output();
        let g = upsample2_backward(&g_up, o.height, o.width);

        let g = d.d1.backward(s, &cache.d1, g, grads, true).unwrap();
        let mut parts = split_channels(&g, &[dw[2], pe[1], img[1]]).into_iter();
        let g_up = parts.next().unwrap();
        g_prompt[1] = parts.next().unwrap();
        g_image[1] = parts.next().unwrap();
        let o = cache.d2.output();
        let g = upsample2_backward(&g_up, o.height, o.width);

        let g = d.d2.backward(s, &cache.d2, g, grads, true).unwrap();
        let mut parts = split_channels(&g, &[dw[3], pe[2], img[2]]).into_iter();
        let g_up = parts.next().unwrap();
        g_prompt[2] = parts.next().unwrap();
        g_image[2] = parts.next().unwrap();
        let o = cache.d3.output();
        let g = upsample2_backward(&g_up, o.height, o.width);

        let g = d.d3.backward(s, &cache.d3, g, grads, true).unwrap();
        let mut parts = split_channels(&g, &[pe[3], img[3]]).into_iter();
        g_prompt[3] = parts.next().unwrap();
        g_image[3] = parts.next().unwrap();

        if !self.config.use_prompt {
            g_prompt.clear();
        }
        (g_prompt, g_image)
    }
}

/// Prompt pyramid for a sparse map; `None` when the module has no encoder.
pub fn encode_prompt(sparse: &SparseDepth, module: &PromptModule) -> Option<FeaturePyramid> {
    let valid: Vec<bool> = sparse.values().iter().map(|&v| v > 0.0).collect();
    module
        .encode_masked(sparse.height(), sparse.width(), sparse.values(), &valid)
        .map(|(p, _)| p)
}

/// Raw (unnormalized) affinity field from the two pyramids.
pub fn decode_affinity(prompt: Option<&FeaturePyramid>, image: &FeaturePyramid, module: &PromptModule) -> Result<AffinityField> {
    let (raw, _) = module.decode(prompt, image)?;
    Ok(AffinityField::new(raw.height, raw.width, module.config.stencil, raw.data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundation::FoundationModel;

    #[test]
    fn decoder_emits_stencil_squared_channels() {
        let bb = BackboneConfig::default();
        let module = PromptModule::new(PromptConfig::default(), &bb, 3).unwrap();
        assert_eq!(module.affinity_channels(), 49);
        let model = FoundationModel::new(bb, 4);
        let out = model.forward(&Tensor::zeros(3, 16, 20));
        let sparse = SparseDepth::empty(16, 20);
        let prompt = encode_prompt(&sparse, &module).unwrap();
        let aff = decode_affinity(Some(&prompt), &out.pyramid, &module).unwrap();
        assert_eq!(aff.channels(), 49);
        assert_eq!(aff.shape(), (16, 20));
    }

    #[test]
    fn even_stencil_is_rejected() {
        let cfg = PromptConfig {
            stencil: 4,
            ..Default::default()
        };
        assert!(PromptModule::new(cfg, &BackboneConfig::default(), 0).is_err());
    }

    #[test]
    fn prompt_presence_must_match_module() {
        let bb = BackboneConfig::default();
        let without = PromptModule::new(
            PromptConfig {
                use_prompt: false,
                ..Default::default()
            },
            &bb,
            0,
        )
        .unwrap();
        let with = PromptModule::new(PromptConfig::default(), &bb, 0).unwrap();
        let model = FoundationModel::new(bb, 1);
        let out = model.forward(&Tensor::zeros(3, 8, 8));
        assert!(encode_prompt(&SparseDepth::empty(8, 8), &without).is_none());
        assert!(decode_affinity(None, &out.pyramid, &without).is_ok());
        assert!(decode_affinity(None, &out.pyramid, &with).is_err());
        let p = encode_prompt(&SparseDepth::empty(8, 8), &with).unwrap();
        assert!(decode_affinity(Some(&p), &out.pyramid, &without).is_err());
        assert!(without.store().len() < with.store().len());
    }

    #[test]
    fn mismatched_pyramids_are_contract_errors() {
        let bb = BackboneConfig::default();
        let module = PromptModule::new(PromptConfig::default(), &bb, 0).unwrap();
        let model = FoundationModel::new(bb, 1);
        let img = model.forward(&Tensor::zeros(3, 8, 8)).pyramid;
        let prompt = encode_prompt(&SparseDepth::empty(16, 16), &module).unwrap();
        assert!(matches!(
            decode_affinity(Some(&prompt), &img, &module),
            Err(NetError::Core(depthprompt_core::Error::Contract(_)))
        ));
    }
}
