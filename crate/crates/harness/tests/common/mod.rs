#![allow(dead_code)]

use depthprompt_core::BiasSpec;
use depthprompt_harness::config::{CorpusConfig, PretrainConfig, RunConfig};
use depthprompt_harness::study::StudyConfig;

/// Small corpus and short schedules; a training run takes well under a second.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig {
        corpus: CorpusConfig {
            height: 16,
            width: 16,
            n_planes: 3,
            n_pretrain: 8,
            n_train: 8,
            n_val: 2,
            n_test: 6,
            ..Default::default()
        },
        train_spec: BiasSpec::random(25),
        test_spec: BiasSpec::random(25),
        epochs: 1,
        pretrain: PretrainConfig {
            epochs: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.optimizer.batch_size = 4;
    cfg
}

pub fn toy_study() -> StudyConfig {
    StudyConfig {
        run: RunConfig {
            epochs: 2,
            ..toy_config()
        },
        seeds: vec![3],
        matched_count: 25,
        sparse_fraction: 0.2,
        grid_stride: 4,
        line_count: 4,
        ..Default::default()
    }
}
