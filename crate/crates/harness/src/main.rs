use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use depthprompt_core::io::{read_affinity, read_raster, write_raster, RasterFormat};
use depthprompt_core::{compute_metrics, fit_scale, propagate_with, EvalWindow, Execution, SparseDepth};
use depthprompt_harness::corpus::{load_split, write_corpus, Split};
use depthprompt_harness::report::{unix_now, write_report};
use depthprompt_harness::study::{run_bias_study, StudyConfig};
use depthprompt_harness::{evaluate, train, HarnessError, Result, RunConfig};
use depthprompt_net::Checkpoint;

#[derive(Parser)]
#[command(name = "depthprompt", version, about = "Sensor-agnostic depth completion toolkit")]
struct Cli {
    /// TOML config (a run config, or a study config for `bias-study`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the initialization seed (and the study seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus (all splits) to --out.
    Generate,
    /// Train one model; checkpoint and training curve go to --out.
    Train,
    /// Score a checkpoint on the test split under the config's test spec.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the sensor-bias study; report files go to --out.
    BiasStudy,
    /// Propagate an initial depth map with a given affinity field.
    Propagate {
        #[arg(long)]
        initial: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        affinity: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_reinjection: bool,
    },
    /// Fit the metric scale of a relative map to sparse measurements.
    ScaleFit {
        #[arg(long)]
        relative: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
    },
    /// Compare a prediction with ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        min_depth: f64,
        #[arg(long, default_value_t = f64::INFINITY)]
        max_depth: f64,
    },
}

fn read_any(path: &Path) -> Result<depthprompt_core::DepthRaster> {
    Ok(read_raster(path, RasterFormat::from_path(path))?)
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.init_seed = seed;
    }
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| HarnessError::Config("this command needs --out <dir>".into()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match &cli.command {
        Command::Generate => {
            let cfg = run_config(cli)?;
            let out = require_out(cli)?;
            let index = write_corpus(out, &cfg.corpus, &cfg.splits, exec)?;
            let total: usize = index.scene_seeds.values().map(Vec::len).sum();
            eprintln!("wrote {total} scenes to {}", out.display());
        }
        Command::Train => {
            let mut cfg = run_config(cli)?;
            if let Some(out) = &cli.out {
                cfg.checkpoints.output = Some(out.clone());
            }
            let outcome = train(&cfg, exec)?;
            if let Some(last) = outcome.curve.last() {
                eprintln!("trained {} epochs, probe loss {:.4}", last.epoch, last.probe_loss);
            }
        }
        Command::Evaluate { checkpoint } => {
            let cfg = run_config(cli)?;
            let ck = Checkpoint::load(checkpoint)?;
            let scenes = load_split(&cfg.corpus, &cfg.splits, Split::Test, exec)?;
            let report = evaluate(&ck, &cfg.test_spec, &scenes, cfg.eval_window, exec)?;
            print_json(&report)?;
        }
        Command::BiasStudy => {
            let mut cfg = match &cli.config {
                Some(path) => StudyConfig::load(path)?,
                None => StudyConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seeds = vec![seed];
            }
            let out = require_out(cli)?;
            let started = unix_now();
            let report = run_bias_study(&cfg, exec)?;
            let written = write_report(&report, out, started)?;
            if let Some(warning) = written.plot_warning {
                eprintln!("warning: {warning}");
            }
            for t in &report.trends {
                let verdict = if t.passed { "holds" } else { "FAILS" };
                eprintln!("{:<16} {}/{} seeds  {verdict}  ({})", t.name, t.holds_count, t.samples.len(), t.claim);
            }
        }
        Command::Propagate {
            initial,
            seeds,
            affinity,
            output,
            steps,
            no_reinjection,
        } => {
            let cfg = run_config(cli)?;
            let mut prop = cfg.propagation;
            if let Some(n) = steps {
                prop.n_steps = *n;
            }
            if *no_reinjection {
                prop.seed_reinjection = false;
            }
            let init = read_any(initial)?;
            let seeds = SparseDepth::from_raster(read_any(seeds)?);
            let field = read_affinity(affinity)?;
            let result = propagate_with(&init, &seeds, &field, &prop, exec)?;
            write_raster(&result, output, RasterFormat::from_path(output))?;
        }
        Command::ScaleFit { relative, sparse } => {
            let fit = fit_scale(&read_any(relative)?, &SparseDepth::from_raster(read_any(sparse)?))?;
            if fit.p_hat <= 0.0 {
                eprintln!("warning: non-positive scale {}", fit.p_hat);
            }
            print_json(&fit)?;
        }
        Command::Metrics {
            pred,
            gt,
            min_depth,
            max_depth,
        } => {
            let report = compute_metrics(&read_any(pred)?, &read_any(gt)?, EvalWindow::new(*min_depth, *max_depth))?;
            print_json(&report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
