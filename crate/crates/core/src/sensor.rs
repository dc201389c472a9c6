//! Sensor-condition transforms: sample-set generators (random, grid, line),
//! range masking, and random depth augmentation.
//!
//! Every sampler copies ground truth verbatim at the retained pixels and
//! writes 0 elsewhere; no value is ever perturbed.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepthRaster, SparseDepth};

/// Closed depth interval `[min_m, max_m]`. `max_m` may be infinite; an
/// infinite bound is left out of serialized forms (JSON has no infinity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeWindow {
    pub min_m: f64,
    #[serde(default = "crate::unbounded", skip_serializing_if = "crate::is_unbounded")]
    pub max_m: f64,
}

impl RangeWindow {
    pub const ALL: RangeWindow = RangeWindow {
        min_m: 0.0,
        max_m: f64::INFINITY,
    };

    pub fn new(min_m: f64, max_m: f64) -> Result<Self> {
        let w = RangeWindow { min_m, max_m };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_m >= 0.0 && self.min_m < self.max_m) || self.min_m.is_nan() {
            return Err(Error::Contract(format!(
                "range window must satisfy 0 <= min < max, got [{}, {}]",
                self.min_m, self.max_m
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, depth: f64) -> bool {
        depth >= self.min_m && depth <= self.max_m
    }

    pub fn intersect(&self, other: &RangeWindow) -> Option<RangeWindow> {
        let w = RangeWindow {
            min_m: self.min_m.max(other.min_m),
            max_m: self.max_m.min(other.max_m),
        };
        (w.min_m <= w.max_m).then_some(w)
    }
}

impl Default for RangeWindow {
    fn default() -> Self {
        RangeWindow::ALL
    }
}

/// Rows eligible for line sampling, as fractions of the image height
/// (`start_frac` inclusive, `end_frac` exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineBand {
    pub start_frac: f64,
    pub end_frac: f64,
}

impl LineBand {
    pub const LOWER_HALF: LineBand = LineBand {
        start_frac: 0.5,
        end_frac: 1.0,
    };
    pub const FULL: LineBand = LineBand {
        start_frac: 0.0,
        end_frac: 1.0,
    };

    /// Row range `[start, end)` for an image of `height` rows.
    pub fn rows(&self, height: usize) -> (usize, usize) {
        let start = (self.start_frac * height as f64).floor().clamp(0.0, height as f64) as usize;
        let end = (self.end_frac * height as f64).ceil().clamp(0.0, height as f64) as usize;
        (start, end.max(start))
    }
}

impl Default for LineBand {
    fn default() -> Self {
        LineBand::LOWER_HALF
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Random {
        sample_count: usize,
    },
    Grid {
        grid_stride: usize,
        #[serde(default)]
        phase: (usize, usize),
    },
    Line {
        line_count: usize,
        #[serde(default)]
        band: LineBand,
    },
}

/// A sensor condition: which pixels get measured, and over which depth range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub pattern: Pattern,
    #[serde(default)]
    pub range_window: RangeWindow,
    #[serde(default)]
    pub rng_seed: u64,
}

impl BiasSpec {
    pub fn random(sample_count: usize) -> Self {
        Self {
            pattern: Pattern::Random { sample_count },
            range_window: RangeWindow::ALL,
            rng_seed: 0,
        }
    }

    pub fn grid(grid_stride: usize) -> Self {
        Self {
            pattern: Pattern::Grid {
                grid_stride,
                phase: (0, 0),
            },
            range_window: RangeWindow::ALL,
            rng_seed: 0,
        }
    }

    pub fn lines(line_count: usize) -> Self {
        Self {
            pattern: Pattern::Line {
                line_count,
                band: LineBand::default(),
            },
            range_window: RangeWindow::ALL,
            rng_seed: 0,
        }
    }

    pub fn with_range(mut self, window: RangeWindow) -> Self {
        self.range_window = window;
        self
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.range_window.validate()?;
        match self.pattern {
            Pattern::Grid { grid_stride, phase } => {
                if grid_stride == 0 || phase.0 >= grid_stride || phase.1 >= grid_stride {
                    return Err(Error::Contract(format!(
                        "grid needs stride >= 1 and phase < stride, got stride {grid_stride}, phase {phase:?}"
                    )));
                }
            }
            Pattern::Line { band, .. } => {
                if !(0.0..=1.0).contains(&band.start_frac)
                    || !(0.0..=1.0).contains(&band.end_frac)
                    || band.start_frac >= band.end_frac
                {
                    return Err(Error::Contract(format!("invalid line band {band:?}")));
                }
            }
            Pattern::Random { .. } => {}
        }
        Ok(())
    }

    /// Masks `gt` to the range window, then samples it with the pattern.
    /// The per-call `seed` is mixed with the spec's own `rng_seed`, so one
    /// spec can be applied to many scenes with distinct draws.
    pub fn apply(&self, gt: &DepthRaster, seed: u64) -> Result<SparseDepth> {
        self.validate()?;
        let windowed = mask_range(gt, self.range_window)?;
        let seed = mix_seed(self.rng_seed, seed);
        match self.pattern {
            Pattern::Random { sample_count } => sample_random(&windowed, sample_count, seed),
            Pattern::Grid { grid_stride, phase } => sample_grid(&windowed, grid_stride, phase),
            Pattern::Line { line_count, band } => sample_lines(&windowed, line_count, band, seed),
        }
    }

    /// Like [`BiasSpec::apply`], but a random pattern asking for more points
    /// than the window holds takes all of them instead of failing.
    pub fn apply_lenient(&self, gt: &DepthRaster, seed: u64) -> Result<SparseDepth> {
        match self.pattern {
            Pattern::Random { sample_count } => {
                self.validate()?;
                let windowed = mask_range(gt, self.range_window)?;
                let n = sample_count.min(windowed.valid_count());
                sample_random(&windowed, n, mix_seed(self.rng_seed, seed))
            }
            _ => self.apply(gt, seed),
        }
    }

    /// Human-readable label used in report tables.
    pub fn label(&self) -> String {
        let pattern = match self.pattern {
            Pattern::Random { sample_count } => format!("random{sample_count}"),
            Pattern::Grid { grid_stride, .. } => format!("grid{grid_stride}"),
            Pattern::Line { line_count, .. } => format!("line{line_count}"),
        };
        if self.range_window == RangeWindow::ALL {
            pattern
        } else if self.range_window.max_m.is_infinite() {
            format!("{pattern}@{}m+", self.range_window.min_m)
        } else {
            format!(
                "{pattern}@{}-{}m",
                self.range_window.min_m, self.range_window.max_m
            )
        }
    }
}

/// How a family member's count is drawn during random depth augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountLaw {
    /// Use the spec's count as is.
    Fixed,
    /// Draw the count log-uniformly over `[1, spec count]`.
    #[default]
    LogUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdaMember {
    pub spec: BiasSpec,
    #[serde(default)]
    pub count_law: CountLaw,
}

impl RdaMember {
    pub fn fixed(spec: BiasSpec) -> Self {
        Self {
            spec,
            count_law: CountLaw::Fixed,
        }
    }

    pub fn log_uniform(spec: BiasSpec) -> Self {
        Self {
            spec,
            count_law: CountLaw::LogUniform,
        }
    }
}

/// Splitmix-style combination of two seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keeps exactly `n` distinct valid pixels of `gt`, chosen uniformly.
pub fn sample_random(gt: &DepthRaster, n: usize, rng_seed: u64) -> Result<SparseDepth> {
    let valid = gt.valid_indices();
    if n > valid.len() {
        return Err(Error::InsufficientSupport {
            requested: n,
            available: valid.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut keep = vec![false; gt.len()];
    for i in index::sample(&mut rng, valid.len(), n) {
        keep[valid[i]] = true;
    }
    Ok(SparseDepth::from_raster(gt.retain(|i, _| keep[i])))
}

/// Keeps valid pixels whose row and column are congruent to `phase` modulo
/// `stride`.
pub fn sample_grid(gt: &DepthRaster, stride: usize, phase: (usize, usize)) -> Result<SparseDepth> {
    if stride == 0 || phase.0 >= stride || phase.1 >= stride {
        return Err(Error::Contract(format!(
            "grid needs stride >= 1 and phase < stride, got stride {stride}, phase {phase:?}"
        )));
    }
    let w = gt.width();
    Ok(SparseDepth::from_raster(gt.retain(|i, _| {
        let (r, c) = (i / w, i % w);
        r % stride == phase.0 && c % stride == phase.1
    })))
}

/// Rows picked by [`sample_lines`]: evenly spaced over the band, with a
/// seeded sub-row offset.
pub fn line_rows(height: usize, n_lines: usize, band: LineBand, rng_seed: u64) -> Result<Vec<usize>> {
    let (start, end) = band.rows(height);
    let available = end - start;
    if n_lines > available {
        return Err(Error::InsufficientSupport {
            requested: n_lines,
            available,
        });
    }
    if n_lines == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let offset: f64 = rng.random();
    let spacing = available as f64 / n_lines as f64;
    Ok((0..n_lines)
        .map(|i| start + (((i as f64 + offset) * spacing).floor() as usize).min(available - 1))
        .collect())
}

/// Keeps valid pixels on `n_lines` rows spread evenly over `band`.
pub fn sample_lines(gt: &DepthRaster, n_lines: usize, band: LineBand, rng_seed: u64) -> Result<SparseDepth> {
    let rows = line_rows(gt.height(), n_lines, band, rng_seed)?;
    let mut on_line = vec![false; gt.height()];
    for r in rows {
        on_line[r] = true;
    }
    let w = gt.width();
    Ok(SparseDepth::from_raster(gt.retain(|i, _| on_line[i / w])))
}

/// Zeroes every pixel outside `window`.
pub fn mask_range(d: &DepthRaster, window: RangeWindow) -> Result<DepthRaster> {
    window.validate()?;
    Ok(d.retain(|_, v| window.contains(v as f64)))
}

/// Random depth augmentation: draws one family member and samples `gt`
/// with it. Random patterns under [`CountLaw::LogUniform`] get their count
/// drawn log-uniformly over `[1, count]`.
///
/// The sampler itself is seeded with `rng_seed` directly, so a single fixed
/// member reproduces the plain sampler bit for bit.
pub fn rda_sample(gt: &DepthRaster, family: &[RdaMember], rng_seed: u64) -> Result<SparseDepth> {
    if family.is_empty() {
        return Err(Error::Contract("RDA family must not be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(1);
    let member = if family.len() == 1 {
        &family[0]
    } else {
        &family[rng.random_range(0..family.len())]
    };
    let mut spec = member.spec;
    if let (Pattern::Random { sample_count }, CountLaw::LogUniform) = (spec.pattern, member.count_law) {
        spec.pattern = Pattern::Random {
            sample_count: log_uniform_count(&mut rng, sample_count),
        };
    }
    spec.validate()?;
    let windowed = mask_range(gt, spec.range_window)?;
    match spec.pattern {
        Pattern::Random { sample_count } => sample_random(&windowed, sample_count, rng_seed),
        Pattern::Grid { grid_stride, phase } => sample_grid(&windowed, grid_stride, phase),
        Pattern::Line { line_count, band } => sample_lines(&windowed, line_count, band, rng_seed),
    }
}

/// Integer count with `ln(count)` uniform over `[0, ln(n_max)]`.
pub fn log_uniform_count<R: Rng>(rng: &mut R, n_max: usize) -> usize {
    if n_max <= 1 {
        return n_max;
    }
    let u: f64 = rng.random();
    let n = (u * (n_max as f64).ln()).exp().round() as usize;
    n.clamp(1, n_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> DepthRaster {
        DepthRaster::new(h, w, (0..h * w).map(|i| 1.0 + i as f32).collect()).unwrap()
    }

    #[test]
    fn random_exhaustive_and_empty() {
        let gt = DepthRaster::new(2, 3, vec![1.0, 0.0, 2.0, 3.0, 0.0, 4.0]).unwrap();
        let all = sample_random(&gt, 4, 7).unwrap();
        assert_eq!(all.as_raster(), &gt);
        let none = sample_random(&gt, 0, 7).unwrap();
        assert_eq!(none.valid_count(), 0);
        assert!(matches!(
            sample_random(&gt, 5, 7),
            Err(Error::InsufficientSupport {
                requested: 5,
                available: 4
            })
        ));
    }

    #[test]
    fn grid_enumeration() {
        let gt = ramp(4, 4);
        let s = sample_grid(&gt, 2, (0, 0)).unwrap();
        assert_eq!(s.valid_indices(), vec![0, 2, 8, 10]);
        let shifted = sample_grid(&gt, 2, (1, 0)).unwrap();
        assert_eq!(shifted.valid_indices(), vec![4, 6, 12, 14]);
        assert_eq!(sample_grid(&gt, 1, (0, 0)).unwrap().as_raster(), &gt);
        let empty = sample_grid(&DepthRaster::zeros(4, 4), 2, (0, 0)).unwrap();
        assert_eq!(empty.valid_count(), 0);
        assert!(sample_grid(&gt, 0, (0, 0)).is_err());
        assert!(sample_grid(&gt, 2, (2, 0)).is_err());
    }

    #[test]
    fn single_line_lands_in_band() {
        let gt = ramp(8, 5);
        for seed in 0..50 {
            let s = sample_lines(&gt, 1, LineBand::LOWER_HALF, seed).unwrap();
            let rows: std::collections::BTreeSet<_> =
                s.valid_indices().iter().map(|i| i / 5).collect();
            assert_eq!(rows.len(), 1);
            let row = *rows.iter().next().unwrap();
            assert!((4..=7).contains(&row), "row {row}");
        }
    }

    #[test]
    fn full_band_all_lines_is_identity() {
        let gt = ramp(6, 3);
        let s = sample_lines(&gt, 6, LineBand::FULL, 3).unwrap();
        assert_eq!(s.as_raster(), &gt);
        assert!(matches!(
            sample_lines(&gt, 4, LineBand::LOWER_HALF, 3),
            Err(Error::InsufficientSupport { .. })
        ));
    }

    #[test]
    fn range_mask_enumeration() {
        let d = DepthRaster::new(1, 3, vec![0.5, 2.0, 5.0]).unwrap();
        let m = mask_range(&d, RangeWindow::new(1.0, 3.0).unwrap()).unwrap();
        assert_eq!(m.values(), &[0.0, 2.0, 0.0]);
        assert_eq!(mask_range(&d, RangeWindow::ALL).unwrap(), d);
        assert!(RangeWindow::new(3.0, 1.0).is_err());
        assert!(RangeWindow::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_rda_family_matches_plain_sampler() {
        let gt = ramp(16, 16);
        let family = [RdaMember::fixed(BiasSpec::random(50))];
        for seed in 0..10 {
            assert_eq!(
                rda_sample(&gt, &family, seed).unwrap(),
                sample_random(&gt, 50, seed).unwrap()
            );
        }
        assert!(rda_sample(&gt, &[], 0).is_err());
    }

    #[test]
    fn log_uniform_count_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = log_uniform_count(&mut rng, 500);
            assert!((1..=500).contains(&n));
        }
        assert_eq!(log_uniform_count(&mut rng, 1), 1);
        assert_eq!(log_uniform_count(&mut rng, 0), 0);
    }

    #[test]
    fn spec_labels() {
        assert_eq!(BiasSpec::random(500).label(), "random500");
        let near = BiasSpec::grid(4).with_range(RangeWindow::new(0.0, 3.0).unwrap());
        assert_eq!(near.label(), "grid4@0-3m");
    }

    #[test]
    fn lenient_apply_takes_everything_available() {
        let gt = DepthRaster::new(1, 4, vec![1.0, 5.0, 6.0, 0.0]).unwrap();
        let spec = BiasSpec::random(10).with_range(RangeWindow::new(4.0, 10.0).unwrap());
        assert!(spec.apply(&gt, 0).is_err());
        let s = spec.apply_lenient(&gt, 0).unwrap();
        assert_eq!(s.values(), &[0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn unbounded_window_round_trips_through_json() {
        let spec = BiasSpec::random(10).with_range(RangeWindow::new(3.0, f64::INFINITY).unwrap());
        let text = serde_json::to_string(&spec).unwrap();
        assert!(!text.contains("null"), "{text}");
        assert_eq!(serde_json::from_str::<BiasSpec>(&text).unwrap(), spec);
        let bounded = BiasSpec::grid(4).with_range(RangeWindow::new(0.0, 3.0).unwrap());
        let text = serde_json::to_string(&bounded).unwrap();
        assert_eq!(serde_json::from_str::<BiasSpec>(&text).unwrap(), bounded);
    }
}
