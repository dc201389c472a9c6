//! Dense depth and image rasters.
//!
//! Depth is stored in meters as `f32`, row-major. A pixel is valid iff its
//! value is strictly positive; zero means "no measurement".

use std::ops::Deref;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DepthRaster {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DepthRaster {
    /// Builds a raster, rejecting non-finite or negative values.
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        check_dims(height, width, values.len(), 1)?;
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Data(format!("depth value {v} at index {i}")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height >= 1 && width >= 1, "raster must be at least 1x1");
        assert!(value.is_finite() && value >= 0.0);
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Builds a raster from values that may violate the invariants and
    /// repairs them: non-finite and negative entries become 0 (invalid).
    pub fn from_values_sanitized(height: usize, width: usize, mut values: Vec<f32>) -> Result<Self> {
        check_dims(height, width, values.len(), 1)?;
        for v in &mut values {
            if !v.is_finite() || *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn is_valid_at(&self, index: usize) -> bool {
        self.values[index] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// Indices of valid pixels in row-major order.
    pub fn valid_indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn same_shape(&self, other: &DepthRaster) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn expect_same_shape(&self, other: &DepthRaster, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Keeps the values where `keep(index, value)` holds and zeroes the rest.
    pub fn retain(&self, mut keep: impl FnMut(usize, f32) -> bool) -> DepthRaster {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep(i, v) { v } else { 0.0 })
            .collect();
        DepthRaster {
            height: self.height,
            width: self.width,
            values,
        }
    }

    pub fn transpose(&self) -> DepthRaster {
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                values[c * self.height + r] = self.values[r * self.width + c];
            }
        }
        DepthRaster {
            height: self.width,
            width: self.height,
            values,
        }
    }

    /// Largest and smallest values over the whole raster (valid or not).
    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// A depth raster whose valid set is a sensor sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    raster: DepthRaster,
    valid_count: usize,
}

impl SparseDepth {
    pub fn from_raster(raster: DepthRaster) -> Self {
        let valid_count = raster.valid_count();
        Self {
            raster,
            valid_count,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            raster: DepthRaster::zeros(height, width),
            valid_count: 0,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn as_raster(&self) -> &DepthRaster {
        &self.raster
    }

    pub fn into_raster(self) -> DepthRaster {
        self.raster
    }

    pub fn transpose(&self) -> SparseDepth {
        SparseDepth::from_raster(self.raster.transpose())
    }
}

impl Deref for SparseDepth {
    type Target = DepthRaster;

    fn deref(&self) -> &DepthRaster {
        &self.raster
    }
}

impl From<DepthRaster> for SparseDepth {
    fn from(raster: DepthRaster) -> Self {
        SparseDepth::from_raster(raster)
    }
}

/// Planar (channel-major) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ImageRaster {
    /// Builds an image from planar values; out-of-range values are clamped
    /// to `[0, 1]`, non-finite values are rejected.
    pub fn new(height: usize, width: usize, channels: usize, mut values: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Contract(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        check_dims(height, width, values.len(), channels)?;
        for v in &mut values {
            if !v.is_finite() {
                return Err(Error::Data("non-finite image value".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[channel * n..(channel + 1) * n]
    }
}

pub(crate) fn check_dims(height: usize, width: usize, len: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Contract(format!(
            "raster dimensions must be positive, got {height}x{width}"
        )));
    }
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Contract("raster dimensions overflow".into()))?;
    if len != expected {
        return Err(Error::Contract(format!(
            "expected {expected} values for {channels}x{height}x{width}, got {len}"
        )));
    }
    Ok(())
}
