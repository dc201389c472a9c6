//! Piecewise-planar synthetic scenes.
//!
//! The image plane is split into convex Voronoi cells, each carrying its own
//! slanted depth plane and albedo. Shading darkens with depth, so intensity
//! edges coincide with depth discontinuities while per-cell albedo keeps the
//! monocular problem ambiguous.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepthRaster, ImageRaster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_planes: usize,
    pub depth_range: (f64, f64),
    pub rng_seed: u64,
    /// Largest depth change of a plane across the full image width (or
    /// height), in meters.
    #[serde(default = "default_max_slope")]
    pub max_slope: f64,
    /// Half-width of the uniform per-pixel image noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_max_slope() -> f64 {
    4.0
}

fn default_noise() -> f64 {
    0.02
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, n_planes: usize, depth_range: (f64, f64), rng_seed: u64) -> Self {
        Self {
            height,
            width,
            n_planes,
            depth_range,
            rng_seed,
            max_slope: default_max_slope(),
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if self.height == 0 || self.width == 0 {
            return Err(Error::Contract("scene must be at least 1x1".into()));
        }
        if self.n_planes == 0 {
            return Err(Error::Contract("scene needs at least one plane".into()));
        }
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Contract(format!(
                "depth range must be positive and ordered, got ({lo}, {hi})"
            )));
        }
        if !(self.max_slope >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Contract("slope and noise must be non-negative".into()));
        }
        Ok(())
    }
}

struct Cell {
    row: f64,
    col: f64,
    base: f64,
    slope_row: f64,
    slope_col: f64,
    albedo: [f64; 3],
}

/// Renders one scene. Deterministic in `spec.rng_seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(ImageRaster, DepthRaster)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (lo, hi) = spec.depth_range;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let cells: Vec<Cell> = (0..spec.n_planes)
        .map(|_| Cell {
            row: rng.random::<f64>() * h as f64,
            col: rng.random::<f64>() * w as f64,
            base: rng.random_range(lo..=hi),
            slope_row: rng.random_range(-1.0..=1.0) * spec.max_slope,
            slope_col: rng.random_range(-1.0..=1.0) * spec.max_slope,
            albedo: [
                rng.random_range(0.35..=1.0),
                rng.random_range(0.35..=1.0),
                rng.random_range(0.35..=1.0),
            ],
        })
        .collect();

    let n = h * w;
    let mut depth = vec![0.0f32; n];
    let mut image = vec![0.0f32; 3 * n];
    for r in 0..h {
        for c in 0..w {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let cell = cells
                .iter()
                .min_by(|a, b| {
                    let da = (a.row - pr).powi(2) + (a.col - pc).powi(2);
                    let db = (b.row - pr).powi(2) + (b.col - pc).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one cell");
            let z = cell.base
                + cell.slope_row * (pr - cell.row) / h as f64
                + cell.slope_col * (pc - cell.col) / w as f64;
            let z = z.clamp(lo, hi);
            let i = r * w + c;
            depth[i] = z as f32;
            let shade = 1.0 - 0.65 * (z - lo) / (hi - lo);
            for ch in 0..3 {
                let noise = if spec.noise > 0.0 {
                    rng.random_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                image[ch * n + i] = (cell.albedo[ch] * shade + noise) as f32;
            }
        }
    }
    // Rounding the clamped f64 into f32 can step just outside the range.
    for d in &mut depth {
        *d = d.clamp(lo as f32, hi as f32);
        if (*d as f64) < lo {
            *d = next_up(*d);
        }
        if (*d as f64) > hi {
            *d = next_down(*d);
        }
    }
    Ok((ImageRaster::new(h, w, 3, image)?, DepthRaster::new(h, w, depth)?))
}

fn next_up(v: f32) -> f32 {
    f32::from_bits(v.to_bits() + 1)
}

fn next_down(v: f32) -> f32 {
    f32::from_bits(v.to_bits() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_flat_plane_is_constant() {
        let mut spec = SceneSpec::new(12, 9, 1, (1.0, 5.0), 3);
        spec.max_slope = 0.0;
        let (img, depth) = generate_scene(&spec).unwrap();
        let first = depth.values()[0];
        assert!(depth.values().iter().all(|&v| v == first));
        for ch in 0..3 {
            let plane = img.plane(ch);
            let (lo, hi) = plane
                .iter()
                .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(hi - lo <= 2.0 * spec.noise as f32 + 1e-6);
        }
    }

    #[test]
    fn noiseless_flat_plane_gives_constant_image() {
        let mut spec = SceneSpec::new(5, 5, 1, (1.0, 2.0), 11);
        spec.max_slope = 0.0;
        spec.noise = 0.0;
        let (img, _) = generate_scene(&spec).unwrap();
        for ch in 0..3 {
            let plane = img.plane(ch);
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_scene(&SceneSpec::new(4, 4, 0, (1.0, 2.0), 0)).is_err());
        assert!(generate_scene(&SceneSpec::new(4, 4, 2, (2.0, 1.0), 0)).is_err());
        assert!(generate_scene(&SceneSpec::new(4, 4, 2, (0.0, 1.0), 0)).is_err());
    }

    #[test]
    fn depth_is_fully_valid() {
        let (_, depth) = generate_scene(&SceneSpec::new(16, 16, 5, (0.5, 10.0), 9)).unwrap();
        assert_eq!(depth.valid_count(), 256);
    }
}
