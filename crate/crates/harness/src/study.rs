//! The sensor-bias study: a fixed set of training runs per seed, each scored
//! under every test condition, plus the directional trends checked on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use depthprompt_core::{BiasSpec, EvalWindow, Execution, MetricReport, RangeWindow};
use depthprompt_net::{Checkpoint, FoundationModel};

use crate::config::{RunConfig, Variant};
use crate::corpus::{load_split, Split};
use crate::error::{HarnessError, Result};
use crate::evaluate::evaluate;
use crate::train::{foundation_checkpoint, pretrain_foundation, train_on, write_curve, CURVE_FILE};

pub const SCHEMA_VERSION: u32 = 1;

pub const FOOTER: &str = "Synthetic desk-scale corpus. Absolute error values are not comparable to \
published benchmarks; only orderings and degradation ratios between cells are meaningful.";

/// Offset between the split seeds of consecutive study seeds.
const SEED_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Shared settings of every run; `variant`, `train_spec`, `test_spec`,
    /// `rda_enabled` and the seeds are overridden per run.
    pub run: RunConfig,
    pub seeds: Vec<u64>,
    /// Random sample count of the matched condition.
    pub matched_count: usize,
    /// Density of the sparse condition relative to the matched one.
    pub sparse_fraction: f64,
    pub grid_stride: usize,
    pub line_count: usize,
    pub near: RangeWindow,
    pub far: RangeWindow,
    /// Cache for backbones and trained runs, one subdirectory per seed.
    pub checkpoint_dir: Option<PathBuf>,
    /// Train runs missing from `checkpoint_dir` instead of failing.
    pub train_missing: bool,
    /// Trend must hold for at least this fraction of seeds.
    pub min_hold_fraction: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            matched_count: 100,
            sparse_fraction: 0.05,
            grid_stride: 4,
            line_count: 8,
            near: RangeWindow { min_m: 0.0, max_m: 3.0 },
            far: RangeWindow::new(3.0, f64::INFINITY).expect("valid window"),
            checkpoint_dir: None,
            train_missing: true,
            min_hold_fraction: 0.8,
        }
    }
}

/// One training run of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub variant: Variant,
    pub train_spec: BiasSpec,
    pub rda_enabled: bool,
}

/// One test condition of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub spec: BiasSpec,
    pub window: EvalWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub run: String,
    pub variant: Variant,
    pub rda_enabled: bool,
    pub train_spec: BiasSpec,
    pub test: String,
    pub test_spec: BiasSpec,
    pub eval_window: EvalWindow,
    /// Hash of the exact run config that produced the checkpoint.
    pub run_config_hash: String,
    /// SHA-256 of the checkpoint's parameter blob.
    pub blob_sha256: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSample {
    pub seed: u64,
    pub value: f64,
    pub reference: f64,
    pub holds: bool,
}

/// A directional claim `value < reference`, checked per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub name: String,
    pub claim: String,
    pub samples: Vec<TrendSample>,
    pub holds_count: usize,
    pub required: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSpec>,
    pub conditions: Vec<Condition>,
    pub cells: Vec<Cell>,
    pub trends: Vec<Trend>,
    pub footer: String,
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("study needs at least one seed".into()));
        }
        if self.matched_count == 0 || !(self.sparse_fraction > 0.0 && self.sparse_fraction <= 1.0) {
            return Err(HarnessError::Config(
                "matched_count must be positive and sparse_fraction in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_hold_fraction) {
            return Err(HarnessError::Config("min_hold_fraction must lie in [0, 1]".into()));
        }
        for spec in self.conditions().iter().map(|c| c.spec).chain(self.runs().iter().map(|r| r.train_spec)) {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn sparse_count(&self) -> usize {
        ((self.matched_count as f64 * self.sparse_fraction).round() as usize).max(1)
    }

    pub fn runs(&self) -> Vec<RunSpec> {
        let matched = BiasSpec::random(self.matched_count);
        let near = matched.with_range(self.near);
        let run = |name: &str, variant, train_spec, rda_enabled| RunSpec {
            name: name.to_string(),
            variant,
            train_spec,
            rda_enabled,
        };
        vec![
            run("full", Variant::Full, matched, false),
            run("no_prompt", Variant::NoPrompt, matched, false),
            run("no_ls", Variant::NoLs, matched, false),
            run("no_spn", Variant::NoSpn, matched, false),
            run("full_rda", Variant::Full, matched, true),
            run("full_near", Variant::Full, near, false),
            run("no_pretrain_near", Variant::NoPretrain, near, false),
        ]
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let whole = self.run.eval_window;
        let clip = |w: RangeWindow| EvalWindow::new(w.min_m.max(whole.min_m), w.max_m.min(whole.max_m));
        let cond = |name: &str, spec: BiasSpec, window| Condition {
            name: name.to_string(),
            spec,
            window,
        };
        let matched = BiasSpec::random(self.matched_count);
        vec![
            cond("matched", matched, whole),
            cond("sparse", BiasSpec::random(self.sparse_count()), whole),
            cond("grid", BiasSpec::grid(self.grid_stride), whole),
            cond("line", BiasSpec::lines(self.line_count), whole),
            cond("near", matched.with_range(self.near), clip(self.near)),
            cond("far", matched.with_range(self.far), clip(self.far)),
        ]
    }

    /// Run config of one seed before the per-run overrides.
    pub fn seed_config(&self, seed: u64) -> RunConfig {
        let mut cfg = self.run.clone();
        let shift = seed.wrapping_mul(SEED_STRIDE);
        cfg.init_seed = seed;
        cfg.splits.pretrain = cfg.splits.pretrain.wrapping_add(shift);
        cfg.splits.train = cfg.splits.train.wrapping_add(shift);
        cfg.splits.val = cfg.splits.val.wrapping_add(shift);
        cfg.splits.test = cfg.splits.test.wrapping_add(shift);
        cfg.checkpoints.foundation = None;
        cfg.checkpoints.output = None;
        cfg
    }

    pub fn run_config(&self, seed: u64, run: &RunSpec) -> RunConfig {
        let mut cfg = self.seed_config(seed);
        cfg.variant = run.variant;
        cfg.train_spec = run.train_spec.with_seed(seed);
        cfg.rda_enabled = run.rda_enabled;
        cfg
    }

    fn seed_dir(&self, seed: u64) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(format!("seed_{seed}")))
    }
}

fn cached(dir: &Path) -> bool {
    dir.join(depthprompt_net::checkpoint::MANIFEST_FILE).is_file()
}

/// Fails with the full list of missing checkpoints when the cache is
/// incomplete and training is disabled.
fn check_cache(cfg: &StudyConfig) -> Result<()> {
    if cfg.train_missing {
        return Ok(());
    }
    let Some(root) = &cfg.checkpoint_dir else {
        return Err(HarnessError::Config(
            "train_missing = false requires a checkpoint_dir".into(),
        ));
    };
    let mut missing = Vec::new();
    for &seed in &cfg.seeds {
        for run in cfg.runs() {
            let dir = root.join(format!("seed_{seed}")).join(&run.name);
            if !cached(&dir) {
                missing.push(format!("seed {seed}: {} ({})", run.name, dir.display()));
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!(
            "missing variant checkpoints:\n  {}",
            missing.join("\n  ")
        )))
    }
}

fn blob_hash(ck: &Checkpoint) -> String {
    hex::encode(Sha256::digest(ck.blob()))
}

struct SeedRunner<'a> {
    study: &'a StudyConfig,
    seed: u64,
    exec: Execution,
    foundation: Option<FoundationModel>,
}

impl SeedRunner<'_> {
    fn foundation(&mut self) -> Result<&FoundationModel> {
        if self.foundation.is_none() {
            let cfg = self.study.seed_config(self.seed);
            let dir = self.study.seed_dir(self.seed).map(|d| d.join("foundation"));
            let model = match &dir {
                Some(d) if cached(d) => Checkpoint::load(d)?.foundation,
                _ => {
                    let scenes = load_split(&cfg.corpus, &cfg.splits, Split::Pretrain, self.exec)?;
                    let model = pretrain_foundation(&cfg, &scenes, self.exec)?;
                    if let Some(d) = &dir {
                        foundation_checkpoint(&cfg, model.clone())?.save(d)?;
                    }
                    model
                }
            };
            self.foundation = Some(model);
        }
        Ok(self.foundation.as_ref().expect("set above"))
    }

    fn checkpoint(&mut self, run: &RunSpec) -> Result<Checkpoint> {
        let cfg = self.study.run_config(self.seed, run);
        let dir = self.study.seed_dir(self.seed).map(|d| d.join(&run.name));
        if let Some(d) = &dir {
            if cached(d) {
                return Ok(Checkpoint::load(d)?);
            }
        }
        let scenes = load_split(&cfg.corpus, &cfg.splits, Split::Train, self.exec)?;
        let foundation = if run.variant == Variant::NoPretrain {
            None
        } else {
            Some(self.foundation()?.clone())
        };
        let outcome = train_on(&cfg, &scenes, foundation.as_ref(), self.exec)?;
        if let Some(d) = &dir {
            outcome.checkpoint.save(d)?;
            write_curve(&d.join(CURVE_FILE), &outcome.curve)?;
        }
        Ok(outcome.checkpoint)
    }
}

/// Trains (or loads) every run for every seed and scores each under every
/// test condition.
pub fn run_bias_study(cfg: &StudyConfig, exec: Execution) -> Result<StudyReport> {
    cfg.validate()?;
    check_cache(cfg)?;
    let runs = cfg.runs();
    let conditions = cfg.conditions();
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        let seed_cfg = cfg.seed_config(seed);
        let test = load_split(&seed_cfg.corpus, &seed_cfg.splits, Split::Test, exec)?;
        let mut runner = SeedRunner {
            study: cfg,
            seed,
            exec,
            foundation: None,
        };
        for run in &runs {
            let ck = runner.checkpoint(run)?;
            let run_cfg = cfg.run_config(seed, run);
            let blob_sha256 = blob_hash(&ck);
            for cond in &conditions {
                let test_spec = cond.spec.with_seed(seed);
                let metrics = evaluate(&ck, &test_spec, &test, cond.window, exec)?;
                if metrics.n_valid == 0 {
                    return Err(HarnessError::Config(format!(
                        "condition {} has no scored pixel for seed {seed}",
                        cond.name
                    )));
                }
                cells.push(Cell {
                    seed,
                    run: run.name.clone(),
                    variant: run.variant,
                    rda_enabled: run.rda_enabled,
                    train_spec: run_cfg.train_spec,
                    test: cond.name.clone(),
                    test_spec,
                    eval_window: cond.window,
                    run_config_hash: run_cfg.hash(),
                    blob_sha256: blob_sha256.clone(),
                    metrics,
                });
            }
        }
    }
    let trends = compute_trends(cfg, &cells);
    Ok(StudyReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        runs,
        conditions,
        cells,
        trends,
        footer: FOOTER.to_string(),
    })
}

impl StudyReport {
    pub fn cell(&self, seed: u64, run: &str, test: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.seed == seed && c.run == run && c.test == test)
    }

    pub fn rmse(&self, seed: u64, run: &str, test: &str) -> Option<f64> {
        self.cell(seed, run, test).map(|c| c.metrics.rmse)
    }

    pub fn trend(&self, name: &str) -> Option<&Trend> {
        self.trends.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Mean RMSE over seeds, keyed by (run, test condition).
    pub fn mean_rmse(&self) -> BTreeMap<(String, String), f64> {
        let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        for c in &self.cells {
            let e = sums.entry((c.run.clone(), c.test.clone())).or_default();
            e.0 += c.metrics.rmse;
            e.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

fn ratio(report: &BTreeMap<(u64, &str, &str), f64>, seed: u64, run: &str, num: &str, den: &str) -> Option<f64> {
    Some(report.get(&(seed, run, num))? / report.get(&(seed, run, den))?)
}

/// The three directional claims of the study.
pub fn compute_trends(cfg: &StudyConfig, cells: &[Cell]) -> Vec<Trend> {
    let rmse: BTreeMap<(u64, &str, &str), f64> = cells
        .iter()
        .map(|c| ((c.seed, c.run.as_str(), c.test.as_str()), c.metrics.rmse))
        .collect();
    type Pick<'a> = Box<dyn Fn(u64) -> Option<(f64, f64)> + 'a>;
    let defs: Vec<(&str, &str, Pick)> = vec![
        (
            "sparsity_shift",
            "RMSE ratio sparse/matched: full < no_prompt",
            Box::new(|s| Some((ratio(&rmse, s, "full", "sparse", "matched")?, ratio(&rmse, s, "no_prompt", "sparse", "matched")?))),
        ),
        (
            "range_shift",
            "RMSE trained near, tested far: full_near < no_pretrain_near",
            Box::new(|s| Some((*rmse.get(&(s, "full_near", "far"))?, *rmse.get(&(s, "no_pretrain_near", "far"))?))),
        ),
        (
            "rda_sparse",
            "RMSE on the sparse condition: full_rda < full",
            Box::new(|s| Some((*rmse.get(&(s, "full_rda", "sparse"))?, *rmse.get(&(s, "full", "sparse"))?))),
        ),
    ];
    let required = ((cfg.min_hold_fraction * cfg.seeds.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    defs.into_iter()
        .map(|(name, claim, pick)| {
            let samples: Vec<TrendSample> = cfg
                .seeds
                .iter()
                .filter_map(|&seed| {
                    let (value, reference) = pick(seed)?;
                    Some(TrendSample {
                        seed,
                        value,
                        reference,
                        holds: value < reference,
                    })
                })
                .collect();
            let holds_count = samples.iter().filter(|s| s.holds).count();
            Trend {
                name: name.to_string(),
                claim: claim.to_string(),
                passed: samples.len() == cfg.seeds.len() && holds_count >= required,
                samples,
                holds_count,
                required,
            }
        })
        .collect()
}
