//! Depth rasters, sensor simulation, least-squares scale alignment and
//! affinity-guided spatial propagation.
//!
//! Everything in this crate is a pure function of its inputs (stochastic
//! operations take an explicit seed), so it is safe to call from many
//! threads at once.

pub mod error;
pub mod exec;
pub mod io;
pub mod metrics;
pub mod propagation;
pub mod raster;
pub mod scale;
pub mod scene;
pub mod sensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use metrics::{compute_metrics, EvalWindow, MetricAccumulator, MetricReport};
pub use propagation::{
    normalize_affinity, propagate, propagate_with, AffinityField, Boundary, PropagationConfig,
};
pub use raster::{DepthRaster, ImageRaster, SparseDepth};
pub use scale::{apply_scale, fit_scale, ScaleFit};
pub use scene::{generate_scene, SceneSpec};
pub use sensor::{
    mask_range, rda_sample, sample_grid, sample_lines, sample_random, BiasSpec, CountLaw,
    LineBand, Pattern, RangeWindow, RdaMember,
};

pub(crate) fn unbounded() -> f64 {
    f64::INFINITY
}

pub(crate) fn is_unbounded(v: &f64) -> bool {
    *v == f64::INFINITY
}
