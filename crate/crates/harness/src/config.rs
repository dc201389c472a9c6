//! Run configuration, loaded from TOML. Field names match the document keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use depthprompt_core::{BiasSpec, EvalWindow, PropagationConfig, RdaMember};
use depthprompt_net::{BackboneConfig, LossConfig, PipelineConfig, PromptConfig};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Directory written by `depthprompt generate`. Without it, scenes are
    /// synthesized in memory from the split seeds.
    pub path: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub n_planes: usize,
    pub depth_range: (f64, f64),
    pub n_pretrain: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            height: 32,
            width: 32,
            n_planes: 5,
            depth_range: (1.0, 10.0),
            n_pretrain: 64,
            n_train: 64,
            n_val: 8,
            n_test: 64,
        }
    }
}

/// Base seeds per split; scene `i` of a split uses `base + i`, so bases must
/// be further apart than the split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSeeds {
    pub pretrain: u64,
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl Default for SplitSeeds {
    fn default() -> Self {
        Self {
            pretrain: 100_000,
            train: 200_000,
            val: 300_000,
            test: 400_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub decay_factors: Vec<f32>,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            decay_factors: vec![0.5, 0.1, 0.05],
            batch_size: 8,
        }
    }
}

/// Backbone pretraining on the pretrain split (scale-invariant loss only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 2e-3,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    /// Pretrained backbone. Without it the backbone is pretrained in process.
    pub foundation: Option<PathBuf>,
    /// Where `train` writes its checkpoint and training curve.
    pub output: Option<PathBuf>,
}

/// Ablation axis. Every variant differs from `Full` in exactly one switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoPrompt,
    NoPretrain,
    NoLs,
    NoSpn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPrompt,
        Variant::NoPretrain,
        Variant::NoLs,
        Variant::NoSpn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrompt => "no_prompt",
            Variant::NoPretrain => "no_pretrain",
            Variant::NoLs => "no_ls",
            Variant::NoSpn => "no_spn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub splits: SplitSeeds,
    pub train_spec: BiasSpec,
    pub test_spec: BiasSpec,
    pub propagation: PropagationConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub rda_enabled: bool,
    /// Sampling family used when `rda_enabled`; empty means "random, log-uniform
    /// count up to the training spec's count".
    pub rda_family: Vec<RdaMember>,
    pub checkpoints: CheckpointPaths,
    pub variant: Variant,
    /// Seeds network initialization and the epoch shuffles.
    pub init_seed: u64,
    pub pretrain: PretrainConfig,
    /// Restrict supervision to the training spec's range window, as when
    /// ground truth comes from the same limited-range sensor.
    pub supervision_in_range: bool,
    pub eval_window: EvalWindow,
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            splits: SplitSeeds::default(),
            train_spec: BiasSpec::random(100),
            test_spec: BiasSpec::random(100),
            propagation: PropagationConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 12,
            rda_enabled: false,
            rda_family: Vec::new(),
            checkpoints: CheckpointPaths::default(),
            variant: Variant::Full,
            init_seed: 0,
            pretrain: PretrainConfig::default(),
            supervision_in_range: true,
            eval_window: EvalWindow::default(),
            backbone: BackboneConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.splits;
        let seeds = [s.pretrain, s.train, s.val, s.test];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                if seeds[i] == seeds[j] {
                    return Err(HarnessError::Config(format!(
                        "split seeds must be distinct, got {seeds:?}"
                    )));
                }
            }
        }
        if !(self.optimizer.learning_rate > 0.0) || !(self.pretrain.learning_rate > 0.0) {
            return Err(HarnessError::Config("learning rates must be positive".into()));
        }
        if self.optimizer.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(HarnessError::Config("batch sizes must be >= 1".into()));
        }
        if self.optimizer.decay_factors.len() > 3 {
            return Err(HarnessError::Config("at most three decay factors are supported".into()));
        }
        let c = &self.corpus;
        if c.height == 0 || c.width == 0 || c.n_planes == 0 {
            return Err(HarnessError::Config("corpus rasters and plane count must be non-empty".into()));
        }
        self.train_spec.validate()?;
        self.test_spec.validate()?;
        for m in &self.rda_family {
            m.spec.validate()?;
        }
        self.loss.validate()?;
        Ok(())
    }

    /// The RDA family in effect.
    pub fn effective_rda_family(&self) -> Vec<RdaMember> {
        if self.rda_family.is_empty() {
            vec![RdaMember::log_uniform(self.train_spec)]
        } else {
            self.rda_family.clone()
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            propagation: self.propagation,
            use_ls: self.variant != Variant::NoLs,
            use_spn: self.variant != Variant::NoSpn,
        }
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            use_prompt: self.variant != Variant::NoPrompt,
            ..self.prompt
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml_str("epochs = 3\nvariant = \"no_prompt\"\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.variant, Variant::NoPrompt);
        assert!(!cfg.prompt_config().use_prompt);
        assert_eq!(cfg.optimizer.learning_rate, 2e-3);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let text = "[splits]\ntrain = 5\ntest = 5\n";
        assert!(matches!(RunConfig::from_toml_str(text), Err(HarnessError::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("epoch = 3\n").is_err());
    }

    #[test]
    fn nonpositive_learning_rate_is_rejected() {
        assert!(RunConfig::from_toml_str("[optimizer]\nlearning_rate = 0.0\n").is_err());
    }

    #[test]
    fn variants_touch_one_switch_each() {
        let base = RunConfig::default();
        for v in Variant::ALL {
            let cfg = RunConfig { variant: v, ..base.clone() };
            let p = cfg.pipeline_config();
            let changed = [
                !cfg.prompt_config().use_prompt,
                !p.use_ls,
                !p.use_spn,
                v == Variant::NoPretrain,
            ]
            .iter()
            .filter(|&&c| c)
            .count();
            assert_eq!(changed, usize::from(v != Variant::Full), "{v:?}");
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
    }
}
