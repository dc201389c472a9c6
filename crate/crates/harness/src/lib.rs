//! Training, evaluation and the sensor-bias study for prompted depth
//! completion.

pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod report;
pub mod study;
pub mod train;

pub use config::{RunConfig, Variant};
pub use corpus::{Scene, Split};
pub use error::{HarnessError, Result};
pub use evaluate::{evaluate, evaluate_with};
pub use train::{train, train_on, TrainOutcome};
pub use study::{run_bias_study, StudyConfig, StudyReport};
