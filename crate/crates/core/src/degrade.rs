//! Synthetic low-quality observations:
//! `LQ = clamp(JPEG_q(pool_s(blur_sigma(GT)) + n_delta), 0, 1)`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::linops::{clamp_kernel_size, default_kernel_size, LinearOperator};
use crate::rng::{streams, SeededRng};

pub const SIGMA_RANGE: (f64, f64) = (0.2, 10.0);
pub const DELTA_RANGE: (f64, f64) = (0.0, 15.0);
pub const QUALITY_RANGE: (u8, u8) = (60, 100);
pub const STANDARD_SCALES: [usize; 3] = [4, 8, 16];

/// Standard JPEG luminance quantization table (natural row-major order).
pub const LUMINANCE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    /// Blur standard deviation in pixels.
    pub sigma: f64,
    /// Downsampling factor.
    pub scale: usize,
    /// Noise standard deviation on the 0-255 scale.
    pub delta: f64,
    /// JPEG quality factor, 1..=100.
    pub quality: u8,
    pub seed: u64,
}

/// Draw `sigma ~ U[0.2, 10]`, `delta ~ U[0, 15]`, `q ~ U{60..=100}` in that order.
pub fn sample_spec(rng: &mut SeededRng, scale: usize, seed: u64) -> Result<DegradationSpec> {
    if !STANDARD_SCALES.contains(&scale) {
        return Err(Error::InvalidConfig(format!(
            "scale {scale} not in {STANDARD_SCALES:?}"
        )));
    }
    let sigma = rng.uniform_range(SIGMA_RANGE.0, SIGMA_RANGE.1);
    let delta = rng.uniform_range(DELTA_RANGE.0, DELTA_RANGE.1);
    let quality = rng.int_inclusive(QUALITY_RANGE.0 as i64, QUALITY_RANGE.1 as i64) as u8;
    Ok(DegradationSpec {
        sigma,
        scale,
        delta,
        quality,
        seed,
    })
}

/// Spec drawn from the dedicated stream of `seed`.
pub fn sample_spec_for_seed(seed: u64, scale: usize) -> Result<DegradationSpec> {
    let mut rng = SeededRng::with_stream(seed, streams::DEGRADATION_SPEC);
    sample_spec(&mut rng, scale, seed)
}

/// Blur (kernel `2 ceil(3 sigma) + 1`, clamped to the image) followed by average pooling.
pub fn degradation_operator(height: usize, width: usize, sigma: f64, scale: usize) -> Result<LinearOperator> {
    let k = clamp_kernel_size(default_kernel_size(sigma), height.min(width));
    LinearOperator::compose(vec![
        LinearOperator::gaussian_blur(height, width, sigma, k)?,
        LinearOperator::avgpool(height, width, scale)?,
    ])
}

pub fn synthesize_lq(gt: &ImageGrid, spec: &DegradationSpec) -> Result<ImageGrid> {
    let (h, w) = gt.shape();
    if spec.scale == 0 || h % spec.scale != 0 || w % spec.scale != 0 {
        return Err(Error::InvalidConfig(format!(
            "image {h}x{w} not divisible by scale {}",
            spec.scale
        )));
    }
    let op = degradation_operator(h, w, spec.sigma, spec.scale)?;
    let mut low = op.apply(gt)?;
    if spec.delta > 0.0 {
        let mut rng = SeededRng::with_stream(spec.seed, streams::DEGRADATION_NOISE);
        let std = spec.delta / 255.0;
        for v in low.values_mut() {
            *v += std * rng.normal();
        }
    }
    Ok(jpeg_quantize(&low, spec.quality)?.clamp(0.0, 1.0))
}

/// libjpeg quality scaling of the luminance table, entries clamped to `1..=255`.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidConfig(format!("JPEG quality {quality} outside 1..=100")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut table = [0.0; 64];
    for (t, &base) in table.iter_mut().zip(&LUMINANCE_TABLE) {
        *t = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(table)
}

fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (k, row) in m.iter_mut().enumerate() {
            let c = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = c * (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
            }
        }
        m
    })
}

/// Orthonormal 8x8 DCT-II of a block (row-major).
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for r in 0..8 {
        for k in 0..8 {
            tmp[r * 8 + k] = (0..8).map(|n| b[k][n] * block[r * 8 + n]).sum();
        }
    }
    let mut out = [0.0; 64];
    for k in 0..8 {
        for c in 0..8 {
            out[k * 8 + c] = (0..8).map(|n| b[k][n] * tmp[n * 8 + c]).sum();
        }
    }
    out
}

pub fn idct8x8(coeffs: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for k in 0..8 {
        for c in 0..8 {
            tmp[k * 8 + c] = (0..8).map(|n| b[n][c] * coeffs[k * 8 + n]).sum();
        }
    }
    let mut out = [0.0; 64];
    for r in 0..8 {
        for c in 0..8 {
            out[r * 8 + c] = (0..8).map(|k| b[k][r] * tmp[k * 8 + c]).sum();
        }
    }
    out
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m >= n {
        period - m
    } else {
        m
    }
}

/// Quantization distortion of baseline JPEG on one channel.
///
/// Samples are mapped to the level-shifted 0-255 scale (`255 v - 128`); each
/// 8x8 block is DCT-transformed, divided by the quality-scaled table, rounded,
/// multiplied back and inverted. Dimensions that are not multiples of 8 are
/// reflect-padded and cropped afterwards. No clamping happens here.
pub fn jpeg_quantize(img: &ImageGrid, quality: u8) -> Result<ImageGrid> {
    let table = quant_table(quality)?;
    let (h, w) = img.shape();
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mut out = ImageGrid::zeros(h, w);
    let mut block = [0.0; 64];
    for br in (0..ph).step_by(8) {
        for bc in (0..pw).step_by(8) {
            for r in 0..8 {
                for c in 0..8 {
                    let v = img.get(reflect_index(br + r, h), reflect_index(bc + c, w));
                    block[r * 8 + c] = 255.0 * v - 128.0;
                }
            }
            let mut coeffs = dct8x8(&block);
            for (c, q) in coeffs.iter_mut().zip(&table) {
                *c = (*c / q).round() * q;
            }
            let rec = idct8x8(&coeffs);
            for r in 0..8 {
                for c in 0..8 {
                    if br + r < h && bc + c < w {
                        out.set(br + r, bc + c, (rec[r * 8 + c] + 128.0) / 255.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Parse `sigma=..,delta=..,q=..` overrides (any subset) onto a base spec.
pub fn apply_overrides(base: DegradationSpec, text: &str) -> Result<DegradationSpec> {
    let mut spec = base;
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got '{part}'")))?;
        let bad = || Error::InvalidConfig(format!("bad value for {key}: '{value}'"));
        match key.trim() {
            "sigma" => spec.sigma = value.trim().parse().map_err(|_| bad())?,
            "delta" => spec.delta = value.trim().parse().map_err(|_| bad())?,
            "q" => spec.quality = value.trim().parse().map_err(|_| bad())?,
            other => return Err(Error::InvalidConfig(format!("unknown spec key '{other}'"))),
        }
    }
    if !(spec.sigma > 0.0) || !(spec.delta >= 0.0) || !(1..=100).contains(&spec.quality) {
        return Err(Error::InvalidConfig(format!("invalid degradation spec {spec:?}")));
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_tables() {
        assert!(quant_table(100).unwrap().iter().all(|&q| q == 1.0));
        let t50 = quant_table(50).unwrap();
        assert_eq!(t50[0], 16.0);
        assert_eq!(t50[63], 99.0);
        // q = 75 -> scale 50: (16 * 50 + 50) / 100 = 8
        assert_eq!(quant_table(75).unwrap()[0], 8.0);
        // q = 10 -> scale 500: min(255, (121*500+50)/100) = 255
        assert_eq!(quant_table(10).unwrap()[46], 255.0);
        assert!(quant_table(0).is_err());
        assert!(quant_table(101).is_err());
    }

    #[test]
    fn dct_is_orthonormal() {
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 - 5.0;
        }
        let coeffs = dct8x8(&block);
        let e1: f64 = block.iter().map(|v| v * v).sum();
        let e2: f64 = coeffs.iter().map(|v| v * v).sum();
        assert!((e1 - e2).abs() < 1e-9);
        let back = idct8x8(&coeffs);
        for (a, b) in back.iter().zip(&block) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn q100_preserves_constant_on_byte_grid() {
        let img = ImageGrid::constant(16, 16, 100.0 / 255.0);
        let out = jpeg_quantize(&img, 100).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let img = ImageGrid::from_fn(10, 13, |r, c| ((r * 13 + c) % 7) as f64 / 7.0);
        let out = jpeg_quantize(&img, 90).unwrap();
        assert_eq!(out.shape(), (10, 13));
    }

    #[test]
    fn spec_sampling_is_deterministic_and_in_range() {
        let a = sample_spec_for_seed(5, 8).unwrap();
        let b = sample_spec_for_seed(5, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.sigma >= 0.2 && a.sigma <= 10.0);
        assert!(sample_spec_for_seed(5, 32).is_err());
    }

    #[test]
    fn overrides() {
        let base = sample_spec_for_seed(1, 4).unwrap();
        let s = apply_overrides(base, "sigma=0.5, q=100").unwrap();
        assert_eq!(s.sigma, 0.5);
        assert_eq!(s.quality, 100);
        assert_eq!(s.delta, base.delta);
        assert!(apply_overrides(base, "gamma=2").is_err());
        assert!(apply_overrides(base, "q=0").is_err());
    }
}
