//! End-to-end composition: relative depth, scale alignment, affinity
//! decoding and propagation, plus the matching backward pass.

use serde::{Deserialize, Serialize};

use depthprompt_core::propagation::{normalize_affinity_backward, propagate_backward, propagate_traced};
use depthprompt_core::{
    apply_scale, fit_scale, normalize_affinity, AffinityField, DepthRaster, Error, Execution, ImageRaster,
    PropagationConfig, ScaleFit, SparseDepth,
};

use crate::error::{NetError, Result};
use crate::foundation::{image_tensor, FoundationModel};
use crate::loss::{loss_si_values, loss_total_values, LossConfig, TotalLoss};
use crate::prompt::PromptModule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub propagation: PropagationConfig,
    /// Align relative depth to the seeds; otherwise `p_hat = 1`.
    pub use_ls: bool,
    /// Refine by propagation; otherwise the output is the aligned depth.
    /// Without any seed the pipeline always falls back to the aligned depth.
    pub use_spn: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            propagation: PropagationConfig::default(),
            use_ls: true,
            use_spn: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub final_depth: DepthRaster,
    pub initial_metric: DepthRaster,
    pub relative: DepthRaster,
    pub scale: ScaleFit,
    /// Normalized affinity; `None` when propagation is disabled.
    pub affinity: Option<AffinityField>,
}

/// `fit_scale`, falling back to the identity when there is nothing to fit.
pub fn fit_scale_or_identity(relative: &DepthRaster, sparse: &SparseDepth) -> Result<ScaleFit> {
    match fit_scale(relative, sparse) {
        Ok(fit) => Ok(fit),
        Err(Error::NoSupport | Error::DegenerateSupport) => Ok(ScaleFit::identity()),
        Err(e) => Err(e.into()),
    }
}

fn check_inputs(image: &ImageRaster, sparse: &SparseDepth, model: &FoundationModel) -> Result<()> {
    if image.shape() != sparse.shape() {
        return Err(Error::Contract(format!(
            "image {:?} vs sparse {:?}",
            image.shape(),
            sparse.shape()
        ))
        .into());
    }
    if image.channels() != model.config().in_channels {
        return Err(NetError::Config(format!(
            "backbone expects {} image channels, got {}",
            model.config().in_channels,
            image.channels()
        )));
    }
    Ok(())
}

pub fn forward_pipeline(
    image: &ImageRaster,
    sparse: &SparseDepth,
    model: &FoundationModel,
    module: &PromptModule,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    forward_pipeline_with(image, sparse, model, module, cfg, Execution::default())
}

pub fn forward_pipeline_with(
    image: &ImageRaster,
    sparse: &SparseDepth,
    model: &FoundationModel,
    module: &PromptModule,
    cfg: &PipelineConfig,
    exec: Execution,
) -> Result<PipelineOutput> {
    check_inputs(image, sparse, model)?;
    let (h, w) = sparse.shape();
    let out = model.forward(&image_tensor(image));
    let relative = DepthRaster::new(h, w, out.relative)?;
    let scale = if cfg.use_ls {
        fit_scale_or_identity(&relative, sparse)?
    } else {
        ScaleFit::identity()
    };
    let initial_metric = apply_scale(&relative, &scale);
    if !cfg.use_spn || sparse.valid_count() == 0 {
        return Ok(PipelineOutput {
            final_depth: initial_metric.clone(),
            initial_metric,
            relative,
            scale,
            affinity: None,
        });
    }
    let valid: Vec<bool> = sparse.values().iter().map(|&v| v > 0.0).collect();
    let prompt = module.encode_masked(h, w, sparse.values(), &valid).map(|(p, _)| p);
    let (raw, _) = module.decode(prompt.as_ref(), &out.pyramid)?;
    let raw = AffinityField::new(h, w, module.config().stencil, raw.data)?;
    let affinity = normalize_affinity(&raw)?;
    let final_depth =
        depthprompt_core::propagation::propagate_with(&initial_metric, sparse, &affinity, &cfg.propagation, exec)?;
    Ok(PipelineOutput {
        final_depth,
        initial_metric,
        relative,
        scale,
        affinity: Some(affinity),
    })
}

/// Loss and parameter gradients for one training sample.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub comb: f64,
    pub si: f64,
    pub foundation: Vec<f32>,
    pub prompt: Vec<f32>,
}

impl SampleGradient {
    pub fn add_assign(&mut self, other: &SampleGradient) {
        self.loss += other.loss;
        self.comb += other.comb;
        self.si += other.si;
        for (a, b) in self.foundation.iter_mut().zip(&other.foundation) {
            *a += b;
        }
        for (a, b) in self.prompt.iter_mut().zip(&other.prompt) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.loss *= factor;
        self.comb *= factor;
        self.si *= factor;
        let f = factor as f32;
        self.foundation.iter_mut().for_each(|g| *g *= f);
        self.prompt.iter_mut().for_each(|g| *g *= f);
    }
}

/// Forward and backward pass of the total loss for one scene.
///
/// Only trainable entries of either parameter store receive gradient.
pub fn sample_gradient(
    image: &ImageRaster,
    sparse: &SparseDepth,
    gt: &DepthRaster,
    model: &FoundationModel,
    module: &PromptModule,
    cfg: &PipelineConfig,
    loss_cfg: &LossConfig,
) -> Result<SampleGradient> {
    check_inputs(image, sparse, model)?;
    if gt.shape() != sparse.shape() {
        return Err(Error::Contract(format!("gt {:?} vs sparse {:?}", gt.shape(), sparse.shape())).into());
    }
    let (h, w) = sparse.shape();
    let n = h * w;
    let out = model.forward(&image_tensor(image));
    let relative = DepthRaster::new(h, w, out.relative.clone())?;

    let scale = if cfg.use_ls {
        fit_scale_or_identity(&relative, sparse)?
    } else {
        ScaleFit::identity()
    };
    let initial_metric = apply_scale(&relative, &scale);

    let mut grad_foundation = model.store().zero_grad();
    let mut grad_prompt = module.store().zero_grad();
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let gt64 = widen(gt.values());
    let init64 = widen(initial_metric.values());

    // gradient w.r.t. the aligned initial depth, plus image-pyramid gradients
    let mut grad_init: Vec<f64>;
    let mut grad_image: Vec<Option<Tensor>> = vec![None; 4];
    let total: TotalLoss;
    if cfg.use_spn && sparse.valid_count() > 0 {
        let valid: Vec<bool> = sparse.values().iter().map(|&v| v > 0.0).collect();
        let encoded = module.encode_masked(h, w, sparse.values(), &valid);
        let prompt = encoded.as_ref().map(|(p, _)| p);
        let (raw_t, dec_cache) = module.decode(prompt, &out.pyramid)?;
        let raw = AffinityField::new(h, w, module.config().stencil, raw_t.data)?;
        let affinity = normalize_affinity(&raw)?;
        let trace = propagate_traced(&initial_metric, sparse, &affinity, &cfg.propagation, Execution::Sequential)?;
        let final64 = widen(trace.states.last().expect("trace has the initial state"));
        total = loss_total_values(&final64, &init64, &gt64, loss_cfg)?;

        let g_final: Vec<f32> = total.grad_final.iter().map(|&g| g as f32).collect();
        let pg = propagate_backward(&trace, sparse, &affinity, &g_final);
        grad_init = total
            .grad_initial
            .iter()
            .zip(&pg.initial)
            .map(|(&a, &b)| a + b as f64)
            .collect();
        let g_raw = normalize_affinity_backward(&raw, &pg.affinity);
        let g_raw = Tensor::from_vec(raw.channels(), h, w, g_raw);
        let (g_prompt_pyr, g_image_pyr) = module.decoder_backward(&dec_cache, g_raw, &mut grad_prompt);
        if let Some((_, enc_cache)) = &encoded {
            module.encoder_backward(enc_cache, &g_prompt_pyr, &mut grad_prompt);
        }
        grad_image = g_image_pyr.into_iter().map(Some).collect();
    } else {
        total = loss_total_values(&init64, &init64, &gt64, loss_cfg)?;
        grad_init = total
            .grad_final
            .iter()
            .zip(&total.grad_initial)
            .map(|(a, b)| a + b)
            .collect();
    }

    // apply_scale zeroes pixels it could not represent; they carry no gradient
    for (g, &v) in grad_init.iter_mut().zip(initial_metric.values()) {
        if v == 0.0 {
            *g = 0.0;
        }
    }

    // d(p * d_i) / d d_j = p [i = j] + d_i dp/dd_j,
    // dp/dd_j = (s_j - 2 p d_j) / sum(d^2) on the support
    let p = scale.p_hat;
    let mut grad_rel: Vec<f64> = grad_init.iter().map(|g| g * p).collect();
    if scale.n_support > 0 {
        let d = widen(relative.values());
        let s = widen(sparse.values());
        let dd: f64 = d.iter().zip(&s).filter(|(_, &s)| s > 0.0).map(|(d, _)| d * d).sum();
        let gd: f64 = grad_init.iter().zip(&d).map(|(g, d)| g * d).sum();
        for j in 0..n {
            if s[j] > 0.0 {
                grad_rel[j] += gd * (s[j] - 2.0 * p * d[j]) / dd;
            }
        }
    }

    if model.store().trainable_count() > 0 {
        let grad_rel: Vec<f32> = grad_rel.iter().map(|&g| g as f32).collect();
        model.backward(&out.cache, &grad_rel, &grad_image, &mut grad_foundation);
    }

    Ok(SampleGradient {
        loss: total.value,
        comb: total.comb,
        si: total.si,
        foundation: grad_foundation,
        prompt: grad_prompt,
    })
}

/// Mean loss and gradient over a batch. Per-sample work may run in parallel;
/// the reduction is always in sample order, so results do not depend on the
/// execution mode.
pub fn batch_gradient<F>(
    count: usize,
    sample: F,
    model: &FoundationModel,
    module: &PromptModule,
    cfg: &PipelineConfig,
    loss_cfg: &LossConfig,
    exec: Execution,
) -> Result<SampleGradient>
where
    F: Fn(usize) -> (ImageRaster, SparseDepth, DepthRaster) + Sync,
{
    if count == 0 {
        return Err(Error::Contract("empty batch".into()).into());
    }
    let parts = exec.map_range(count, |i| {
        let (image, sparse, gt) = sample(i);
        sample_gradient(&image, &sparse, &gt, model, module, cfg, loss_cfg)
    });
    let mut acc: Option<SampleGradient> = None;
    for part in parts {
        let part = part?;
        match acc.as_mut() {
            None => acc = Some(part),
            Some(a) => a.add_assign(&part),
        }
    }
    let mut acc = acc.expect("count > 0");
    acc.scale(1.0 / count as f64);
    Ok(acc)
}

/// Scale-invariant loss of the raw relative prediction and its gradient
/// with respect to the backbone parameters. Used to pretrain the backbone.
pub fn relative_gradient(
    image: &ImageRaster,
    gt: &DepthRaster,
    model: &FoundationModel,
    lambda_si: f64,
) -> Result<(f64, Vec<f32>)> {
    if image.shape() != gt.shape() {
        return Err(Error::Contract(format!("image {:?} vs gt {:?}", image.shape(), gt.shape())).into());
    }
    let out = model.forward(&image_tensor(image));
    let pred: Vec<f64> = out.relative.iter().map(|&v| v as f64).collect();
    let gt64: Vec<f64> = gt.values().iter().map(|&v| v as f64).collect();
    let si = loss_si_values(&pred, &gt64, lambda_si)?;
    let grad_rel: Vec<f32> = si.grad.iter().map(|&g| g as f32).collect();
    let mut grads = model.store().zero_grad();
    model.backward(&out.cache, &grad_rel, &[], &mut grads);
    Ok((si.value, grads))
}
