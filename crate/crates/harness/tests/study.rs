mod common;

use common::toy_study;
use depthprompt_core::Execution;
use depthprompt_harness::report::{write_report, CELLS_FILE, REPORT_FILE, RUN_INFO_FILE, SUMMARY_FILE, TRENDS_FILE};
use depthprompt_harness::study::{run_bias_study, StudyConfig, StudyReport, SCHEMA_VERSION};
use depthprompt_harness::{HarnessError, RunConfig, Variant};

fn reduced_report() -> StudyReport {
    run_bias_study(&toy_study(), Execution::Parallel).unwrap()
}

#[test]
fn report_round_trips_and_files_are_written() {
    let report = reduced_report();
    assert_eq!(report.schema_version, SCHEMA_VERSION);
    assert_eq!(StudyReport::from_json(&report.to_json().unwrap()).unwrap(), report);
    let cfg = toy_study();
    assert_eq!(report.cells.len(), cfg.runs().len() * cfg.conditions().len());
    assert!(report.cells.iter().all(|c| c.metrics.n_valid > 0));

    let dir = tempfile::tempdir().unwrap();
    let written = write_report(&report, dir.path(), 0).unwrap();
    for f in [REPORT_FILE, CELLS_FILE, SUMMARY_FILE, TRENDS_FILE, RUN_INFO_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let on_disk = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(StudyReport::from_json(&on_disk).unwrap(), report);
    let rows = std::fs::read_to_string(dir.path().join(CELLS_FILE)).unwrap().lines().count();
    assert_eq!(rows, report.cells.len() + 1);
    if written.plot_warning.is_none() {
        assert!(written.files.iter().any(|p| p.extension().is_some_and(|e| e == "png")));
    }
}

#[test]
fn matched_condition_beats_shifted_ones_for_the_baseline() {
    let report = reduced_report();
    let seed = report.seeds[0];
    let rmse = |run: &str, test: &str| report.rmse(seed, run, test).unwrap();
    assert!(rmse("full", "matched") <= rmse("full", "sparse"));
    assert!(rmse("full_near", "near") <= rmse("full_near", "far"));
}

#[test]
fn cells_carry_enough_provenance_to_be_regenerated() {
    let cfg = toy_study();
    let report = reduced_report();
    for cell in &report.cells {
        let run = report.runs.iter().find(|r| r.name == cell.run).unwrap();
        let run_cfg: RunConfig = cfg.run_config(cell.seed, run);
        assert_eq!(run_cfg.hash(), cell.run_config_hash);
        assert_eq!(run_cfg.train_spec, cell.train_spec);
    }
    assert_eq!(report.config_hash, cfg.hash());
}

#[test]
fn ablations_differ_from_full_along_one_axis() {
    let cfg = toy_study();
    let full = cfg.runs().into_iter().find(|r| r.name == "full").unwrap();
    let base = cfg.run_config(3, &full);
    for run in cfg.runs().iter().filter(|r| r.train_spec == full.train_spec && r.name != "full") {
        let other = cfg.run_config(3, run);
        let diff = [
            other.variant != base.variant,
            other.rda_enabled != base.rda_enabled,
        ];
        assert_eq!(diff.iter().filter(|&&d| d).count(), 1, "{}", run.name);
        let mut aligned = other.clone();
        aligned.variant = Variant::Full;
        aligned.rda_enabled = false;
        assert_eq!(aligned, base, "{}", run.name);
    }
}

#[test]
fn missing_checkpoints_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = StudyConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        train_missing: false,
        ..toy_study()
    };
    match run_bias_study(&cfg, Execution::Parallel) {
        Err(HarnessError::Config(msg)) => {
            for run in cfg.runs() {
                assert!(msg.contains(&run.name), "{msg}");
            }
        }
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn cached_checkpoints_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = StudyConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..toy_study()
    };
    let fresh = run_bias_study(&cfg, Execution::Parallel).unwrap();
    let reuse = StudyConfig {
        train_missing: false,
        ..cfg.clone()
    };
    let cached = run_bias_study(&reuse, Execution::Parallel).unwrap();
    assert_eq!(fresh.cells, cached.cells);
}

#[test]
fn study_config_parses_from_toml() {
    let cfg = StudyConfig::from_toml_str("seeds = [7, 8]\nmatched_count = 50\n[run]\nepochs = 2\n").unwrap();
    assert_eq!(cfg.seeds, vec![7, 8]);
    assert_eq!(cfg.sparse_count(), 3);
    assert!(StudyConfig::from_toml_str("seeds = []\n").is_err());
}
