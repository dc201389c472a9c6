//! RMSE / MAE / DELTA1 over gt-valid pixels inside an evaluation window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::DepthRaster;

pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Closed depth interval `[min_m, max_m]` of ground truth that gets scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalWindow {
    pub min_m: f64,
    #[serde(default = "crate::unbounded", skip_serializing_if = "crate::is_unbounded")]
    pub max_m: f64,
}

impl Default for EvalWindow {
    fn default() -> Self {
        Self {
            min_m: 0.001,
            max_m: f64::INFINITY,
        }
    }
}

impl EvalWindow {
    pub fn new(min_m: f64, max_m: f64) -> Self {
        Self { min_m, max_m }
    }

    #[inline]
    pub fn contains(&self, depth: f64) -> bool {
        depth >= self.min_m && depth <= self.max_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub delta1: f64,
    pub n_valid: u64,
}

/// Running sums for pooling metrics over many rasters.
///
/// Pooling is per pixel: the merged report equals the report of one big
/// raster holding every evaluated pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    sum_sq: f64,
    sum_abs: f64,
    inliers: u64,
    count: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &DepthRaster, gt: &DepthRaster, window: EvalWindow) -> Result<()> {
        pred.expect_same_shape(gt, "metrics")?;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            let g = g as f64;
            if g <= 0.0 || !window.contains(g) {
                continue;
            }
            let p = p as f64;
            let err = p - g;
            self.sum_sq += err * err;
            self.sum_abs += err.abs();
            // p == 0 gives an infinite ratio and never counts as an inlier.
            let ratio = (p / g).max(g / p);
            if ratio < DELTA1_THRESHOLD {
                self.inliers += 1;
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.sum_sq += other.sum_sq;
        self.sum_abs += other.sum_abs;
        self.inliers += other.inliers;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let n = self.count as f64;
        let rmse = (self.sum_sq / n).sqrt();
        let mae = self.sum_abs / n;
        Ok(MetricReport {
            // Rounding can push sqrt(mean sq) a hair below mean abs when all
            // errors are equal.
            rmse: rmse.max(mae),
            mae,
            delta1: self.inliers as f64 / n,
            n_valid: self.count,
        })
    }
}

pub fn compute_metrics(pred: &DepthRaster, gt: &DepthRaster, window: EvalWindow) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.add(pred, gt, window)?;
    acc.report()
}
