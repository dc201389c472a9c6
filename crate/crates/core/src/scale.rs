//! Closed-form least-squares alignment of relative depth to metric scale.
//!
//! Minimizing `||p * d - s||` over the scalar `p` on the seed pixels has the
//! normal-equation solution `p = sum(d * s) / sum(d * d)`. There is no offset
//! term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepthRaster, SparseDepth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    pub p_hat: f64,
    pub n_support: usize,
    pub residual_norm: f64,
}

impl ScaleFit {
    /// The fallback used when there is nothing to fit against.
    pub fn identity() -> Self {
        Self {
            p_hat: 1.0,
            n_support: 0,
            residual_norm: 0.0,
        }
    }
}

/// Fits `p_hat` over the valid pixels of `sparse`.
///
/// Pixels where `relative` is zero stay in the support: they add nothing to
/// either normal-equation sum but do count toward the residual.
pub fn fit_scale(relative: &DepthRaster, sparse: &SparseDepth) -> Result<ScaleFit> {
    relative.expect_same_shape(sparse, "fit_scale")?;
    let mut dd = 0.0f64;
    let mut ds = 0.0f64;
    let mut n_support = 0usize;
    for (&d, &s) in relative.values().iter().zip(sparse.values()) {
        if s > 0.0 {
            let (d, s) = (d as f64, s as f64);
            dd += d * d;
            ds += d * s;
            n_support += 1;
        }
    }
    if n_support == 0 {
        return Err(Error::NoSupport);
    }
    if dd == 0.0 {
        return Err(Error::DegenerateSupport);
    }
    let p_hat = ds / dd;
    let residual_norm = residual_norm(relative, sparse, p_hat);
    Ok(ScaleFit {
        p_hat,
        n_support,
        residual_norm,
    })
}

/// `||p * d - s||_2` over the valid pixels of `sparse`.
pub fn residual_norm(relative: &DepthRaster, sparse: &SparseDepth, p: f64) -> f64 {
    relative
        .values()
        .iter()
        .zip(sparse.values())
        .filter(|(_, &s)| s > 0.0)
        .map(|(&d, &s)| {
            let r = p * d as f64 - s as f64;
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Multiplies every pixel by `p_hat`. Pixels that would turn negative or
/// non-finite are written as 0 (invalid).
pub fn apply_scale(relative: &DepthRaster, fit: &ScaleFit) -> DepthRaster {
    let p = fit.p_hat;
    let values = relative
        .values()
        .iter()
        .map(|&v| {
            let scaled = (p * v as f64) as f32;
            if scaled.is_finite() && scaled >= 0.0 {
                scaled
            } else {
                0.0
            }
        })
        .collect();
    DepthRaster::new(relative.height(), relative.width(), values)
        .expect("sanitized values satisfy the raster invariants")
}
