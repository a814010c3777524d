//! Single-channel real-valued rasters.

use crate::error::{Error, Result};

/// A row-major `height x width` raster of `f64` samples.
///
/// Clean images nominally live in `[0, 1]`; intermediate diffusion states are
/// unbounded. Constructors reject non-finite entries, arithmetic helpers do
/// not re-check (samplers call [`ImageGrid::all_finite`] explicitly).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::InvalidConfig(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_raw(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::from_raw(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn ensure_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape(),
            });
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        other.ensure_shape(self.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        Self::from_raw(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise combination; panics on shape mismatch (callers check first).
    pub fn zip_map(&self, other: &ImageGrid, f: impl Fn(f64, f64) -> f64) -> ImageGrid {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self::from_raw(
            self.height,
            self.width,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &ImageGrid) -> ImageGrid {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ImageGrid) -> ImageGrid {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> ImageGrid {
        self.map(|v| v * factor)
    }

    pub fn dot(&self, other: &ImageGrid) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population variance over all pixels (shifted by the first sample, so
    /// constant grids give exactly zero).
    pub fn variance(&self) -> f64 {
        let Some(&shift) = self.values.first() else {
            return 0.0;
        };
        let n = self.values.len() as f64;
        let (s1, s2) = self.values.iter().fold((0.0, 0.0), |(a, b), v| {
            let d = v - shift;
            (a + d, b + d * d)
        });
        let mean = s1 / n;
        (s2 / n - mean * mean).max(0.0)
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImageGrid {
        self.map(|v| v.clamp(lo, hi))
    }
}
