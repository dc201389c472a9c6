//! Backbone pretraining and prompt-module training loops.
//!
//! Both loops are deterministic given the config: epoch order comes from a
//! seeded shuffle, sensor draws are keyed by (scene, epoch), and per-sample
//! gradients are reduced in sample order whatever the execution mode.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use depthprompt_core::sensor::mix_seed;
use depthprompt_core::{mask_range, rda_sample, DepthRaster, Error, Execution, ImageRaster, SparseDepth};
use depthprompt_net::{
    apply_bias_tuning, batch_gradient, forward_pipeline_with, loss_total, relative_gradient, Adam, AdamConfig,
    Checkpoint, FoundationModel, NetError, PromptModule, StepSchedule,
};

use crate::config::{RunConfig, Variant};
use crate::corpus::{load_split, Scene, Split};
use crate::error::{HarnessError, Result};

pub const CURVE_FILE: &str = "training_curve.csv";

/// Scenes whose loss is logged after every epoch, with fixed sensor draws.
const PROBE_SCENES: usize = 8;
const PROBE_DRAW: u64 = u64::MAX;

// Seed streams derived from `init_seed`.
const STREAM_BACKBONE: u64 = 1;
const STREAM_PROMPT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_PRETRAIN_SHUFFLE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub learning_rate: f32,
    /// Mean batch loss over the epoch (empty for row 0).
    pub train_loss: Option<f64>,
    pub probe_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRow>,
}

fn all_finite(values: &[f32]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Non-finite values surfacing inside the forward pass (e.g. an affinity
/// that overflowed) mean the parameters blew up.
fn numeric_blowup(e: &HarnessError) -> bool {
    matches!(e, HarnessError::Net(NetError::Core(Error::Data(_))))
}

fn seeds_of(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("init".to_string(), cfg.init_seed),
        ("split_pretrain".to_string(), cfg.splits.pretrain),
        ("split_train".to_string(), cfg.splits.train),
        ("split_val".to_string(), cfg.splits.val),
        ("split_test".to_string(), cfg.splits.test),
    ])
}

/// Freshly initialized backbone for this config (every parameter trainable).
pub fn initial_backbone(cfg: &RunConfig) -> FoundationModel {
    FoundationModel::new(cfg.backbone, mix_seed(cfg.init_seed, STREAM_BACKBONE))
}

/// Pretrains every backbone parameter with the scale-invariant loss on the
/// pretrain split.
pub fn pretrain_foundation(cfg: &RunConfig, scenes: &[Scene], exec: Execution) -> Result<FoundationModel> {
    let mut model = initial_backbone(cfg);
    if scenes.is_empty() || cfg.pretrain.epochs == 0 {
        return Ok(model);
    }
    let p = &cfg.pretrain;
    let schedule = StepSchedule::scaled(p.learning_rate, p.epochs, cfg.optimizer.decay_factors.clone());
    let mut adam = Adam::new(model.store(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.init_seed, STREAM_PRETRAIN_SHUFFLE));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..p.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(p.batch_size).enumerate() {
            let parts = exec.map_range(batch.len(), |i| {
                let s = &scenes[batch[i]];
                relative_gradient(&s.image, &s.gt, &model, cfg.loss.lambda_si)
            });
            let mut grad = model.store().zero_grad();
            let mut loss = 0.0;
            for part in parts {
                let (l, g) = part?;
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !loss.is_finite() || !all_finite(&grad) {
                return Err(HarnessError::Config(format!(
                    "backbone pretraining diverged at epoch {epoch}, step {step}"
                )));
            }
            adam.step(model.store_mut(), &grad, lr);
        }
    }
    Ok(model)
}

/// Sparse input and supervision for one scene in one epoch.
pub fn training_sample(cfg: &RunConfig, scene: &Scene, draw: u64) -> Result<(SparseDepth, DepthRaster)> {
    let spec = &cfg.train_spec;
    let sparse = if cfg.rda_enabled {
        match rda_sample(&scene.gt, &cfg.effective_rda_family(), mix_seed(spec.rng_seed, draw)) {
            Err(Error::InsufficientSupport { .. }) => spec.apply_lenient(&scene.gt, draw)?,
            other => other?,
        }
    } else {
        spec.apply_lenient(&scene.gt, draw)?
    };
    let gt = if cfg.supervision_in_range {
        mask_range(&scene.gt, spec.range_window)?
    } else {
        scene.gt.clone()
    };
    Ok((sparse, gt))
}

fn draw_seed(scene: &Scene, epoch: u64) -> u64 {
    mix_seed(scene.seed, epoch)
}

fn probe_loss(
    cfg: &RunConfig,
    probe: &[(ImageRaster, SparseDepth, DepthRaster)],
    model: &FoundationModel,
    module: &PromptModule,
) -> Result<f64> {
    let pipeline = cfg.pipeline_config();
    let mut total = 0.0;
    for (image, sparse, gt) in probe {
        let out = forward_pipeline_with(image, sparse, model, module, &pipeline, Execution::Sequential)?;
        total += loss_total(&out.final_depth, &out.initial_metric, gt, &cfg.loss)?;
    }
    Ok(total / probe.len() as f64)
}

/// Trains the prompt module (and the backbone biases, or the whole backbone
/// for [`Variant::NoPretrain`]) on `scenes`.
///
/// `foundation` is the pretrained backbone; it is ignored for
/// [`Variant::NoPretrain`] and required otherwise.
pub fn train_on(
    cfg: &RunConfig,
    scenes: &[Scene],
    foundation: Option<&FoundationModel>,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = match (cfg.variant, foundation) {
        (Variant::NoPretrain, _) => initial_backbone(cfg),
        (_, Some(f)) => apply_bias_tuning(f.clone())?,
        (_, None) => {
            return Err(HarnessError::Config(format!(
                "variant {} needs a pretrained backbone",
                cfg.variant.label()
            )))
        }
    };
    let mut module = PromptModule::new(cfg.prompt_config(), &cfg.backbone, mix_seed(cfg.init_seed, STREAM_PROMPT))?;
    let pipeline = cfg.pipeline_config();

    // scenes with nothing to supervise (e.g. no pixel inside the window) are skipped
    let mut usable = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        if training_sample(cfg, s, 0)?.1.valid_count() > 0 {
            usable.push(i);
        }
    }
    if usable.is_empty() {
        return Err(HarnessError::Config("no training scene has valid supervision".into()));
    }
    let probe = usable
        .iter()
        .take(PROBE_SCENES)
        .map(|&i| {
            let (sparse, gt) = training_sample(cfg, &scenes[i], draw_seed(&scenes[i], PROBE_DRAW))?;
            Ok((scenes[i].image.clone(), sparse, gt))
        })
        .collect::<Result<Vec<_>>>()?;

    let schedule = StepSchedule::scaled(cfg.optimizer.learning_rate, cfg.epochs, cfg.optimizer.decay_factors.clone());
    let mut adam_f = Adam::new(model.store(), AdamConfig::default());
    let mut adam_p = Adam::new(module.store(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.init_seed, STREAM_SHUFFLE));
    let mut curve = vec![CurveRow {
        epoch: 0,
        learning_rate: schedule.lr(0),
        train_loss: None,
        probe_loss: probe_loss(cfg, &probe, &model, &module)?,
    }];
    let mut order = usable.clone();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let last_good = (model.clone(), module.clone());
        let mut epoch_loss = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.optimizer.batch_size).collect();
        for (step, batch) in batches.iter().enumerate() {
            let samples = batch
                .iter()
                .map(|&i| {
                    let s = &scenes[i];
                    let (sparse, gt) = training_sample(cfg, s, draw_seed(s, epoch as u64))?;
                    Ok((s.image.clone(), sparse, gt))
                })
                .collect::<Result<Vec<_>>>()?;
            let diverged = |(foundation, prompt): (FoundationModel, PromptModule)| HarnessError::Divergence {
                epoch,
                step,
                last_good: Box::new(make_checkpoint(cfg, foundation, prompt, &curve)),
            };
            let g = match batch_gradient(samples.len(), |i| samples[i].clone(), &model, &module, &pipeline, &cfg.loss, exec) {
                Ok(g) => g,
                Err(e) => {
                    let e = HarnessError::from(e);
                    return Err(if numeric_blowup(&e) { diverged(last_good) } else { e });
                }
            };
            if g.loss.is_finite() && all_finite(&g.foundation) && all_finite(&g.prompt) {
                adam_f.step(model.store_mut(), &g.foundation, lr);
                adam_p.step(module.store_mut(), &g.prompt, lr);
            }
            if !g.loss.is_finite() || !all_finite(model.store().values()) || !all_finite(module.store().values()) {
                return Err(diverged(last_good));
            }
            epoch_loss += g.loss;
        }
        let probe_loss = match probe_loss(cfg, &probe, &model, &module) {
            Ok(l) if l.is_finite() => l,
            Ok(_) => return Err(diverged_at(cfg, epoch, batches.len(), last_good, &curve)),
            Err(e) if numeric_blowup(&e) => return Err(diverged_at(cfg, epoch, batches.len(), last_good, &curve)),
            Err(e) => return Err(e),
        };
        curve.push(CurveRow {
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss: Some(epoch_loss / batches.len() as f64),
            probe_loss,
        });
    }
    Ok(TrainOutcome {
        checkpoint: make_checkpoint(cfg, model, module, &curve),
        curve,
    })
}

fn diverged_at(
    cfg: &RunConfig,
    epoch: usize,
    step: usize,
    (foundation, prompt): (FoundationModel, PromptModule),
    curve: &[CurveRow],
) -> HarnessError {
    HarnessError::Divergence {
        epoch,
        step,
        last_good: Box::new(make_checkpoint(cfg, foundation, prompt, curve)),
    }
}

fn make_checkpoint(cfg: &RunConfig, foundation: FoundationModel, prompt: PromptModule, curve: &[CurveRow]) -> Checkpoint {
    let mut provenance = BTreeMap::from([
        ("stage".to_string(), "train".to_string()),
        ("variant".to_string(), cfg.variant.label().to_string()),
        ("train_spec".to_string(), cfg.train_spec.label()),
        ("rda_enabled".to_string(), cfg.rda_enabled.to_string()),
        ("epochs".to_string(), cfg.epochs.to_string()),
        ("config_hash".to_string(), cfg.hash()),
    ]);
    if let Some(last) = curve.last() {
        provenance.insert("epochs_completed".to_string(), last.epoch.to_string());
        provenance.insert("probe_loss".to_string(), format!("{:?}", last.probe_loss));
    }
    Checkpoint {
        foundation,
        prompt,
        pipeline: cfg.pipeline_config(),
        seeds: seeds_of(cfg),
        provenance,
    }
}

/// Wraps a pretrained backbone as a checkpoint (the prompt part is an
/// untrained module and is ignored when the backbone is reused).
pub fn foundation_checkpoint(cfg: &RunConfig, foundation: FoundationModel) -> Result<Checkpoint> {
    let prompt = PromptModule::new(cfg.prompt, &cfg.backbone, mix_seed(cfg.init_seed, STREAM_PROMPT))?;
    Ok(Checkpoint {
        foundation,
        prompt,
        pipeline: cfg.pipeline_config(),
        seeds: seeds_of(cfg),
        provenance: BTreeMap::from([
            ("stage".to_string(), "pretrain".to_string()),
            ("epochs".to_string(), cfg.pretrain.epochs.to_string()),
            ("config_hash".to_string(), cfg.hash()),
        ]),
    })
}

pub fn write_curve(path: &Path, curve: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in curve {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// The backbone a run starts from: loaded from the configured checkpoint, or
/// pretrained in process.
pub fn resolve_foundation(cfg: &RunConfig, exec: Execution) -> Result<Option<FoundationModel>> {
    if cfg.variant == Variant::NoPretrain {
        return Ok(None);
    }
    if let Some(path) = &cfg.checkpoints.foundation {
        return Ok(Some(Checkpoint::load(path)?.foundation));
    }
    let scenes = load_split(&cfg.corpus, &cfg.splits, Split::Pretrain, exec)?;
    Ok(Some(pretrain_foundation(cfg, &scenes, exec)?))
}

/// Full training entry point. With an output path, writes the checkpoint and
/// the training curve there; on divergence the last good parameters are
/// written instead and the error is returned.
pub fn train(cfg: &RunConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenes = load_split(&cfg.corpus, &cfg.splits, Split::Train, exec)?;
    let foundation = resolve_foundation(cfg, exec)?;
    let outcome = train_on(cfg, &scenes, foundation.as_ref(), exec);
    if let Some(dir) = &cfg.checkpoints.output {
        match &outcome {
            Ok(o) => {
                o.checkpoint.save(dir)?;
                write_curve(&dir.join(CURVE_FILE), &o.curve)?;
            }
            Err(HarnessError::Divergence { last_good, .. }) => last_good.save(dir)?,
            Err(_) => {}
        }
    }
    outcome
}
