//! Orthonormal 2-D Haar transform.
//!
//! For a 2x2 block `[a b; c d]` the subbands are
//! `LL = (a+b+c+d)/2`, `LH = (a-b+c-d)/2`, `HL = (a+b-c-d)/2`, `HH = (a-b-c+d)/2`.
//! The transform is orthogonal, so its adjoint equals its inverse.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// The three detail planes of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    pub lh: ImageGrid,
    pub hl: ImageGrid,
    pub hh: ImageGrid,
}

impl DetailBands {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            lh: ImageGrid::zeros(height, width),
            hl: ImageGrid::zeros(height, width),
            hh: ImageGrid::zeros(height, width),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.lh.shape()
    }

    pub fn planes(&self) -> [&ImageGrid; 3] {
        [&self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.planes().iter().map(|p| p.norm_sq()).sum()
    }

    fn map2(&self, other: &DetailBands, f: impl Fn(f64, f64) -> f64 + Copy) -> DetailBands {
        DetailBands {
            lh: self.lh.zip_map(&other.lh, f),
            hl: self.hl.zip_map(&other.hl, f),
            hh: self.hh.zip_map(&other.hh, f),
        }
    }

    pub fn sub(&self, other: &DetailBands) -> DetailBands {
        self.map2(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> DetailBands {
        DetailBands {
            lh: self.lh.scale(k),
            hl: self.hl.scale(k),
            hh: self.hh.scale(k),
        }
    }
}

/// Single-level decomposition: low-pass `L` and the merged high-frequency part `VHD`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    pub low: ImageGrid,
    pub vhd: DetailBands,
}

impl WaveletBands {
    pub fn high_energy(&self) -> f64 {
        self.vhd.energy()
    }
}

pub fn haar_decompose(img: &ImageGrid) -> Result<WaveletBands> {
    let (h, w) = img.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidConfig(format!(
            "Haar decomposition needs even dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut low = ImageGrid::zeros(oh, ow);
    let mut vhd = DetailBands::zeros(oh, ow);
    for r in 0..oh {
        for c in 0..ow {
            let a = img.get(2 * r, 2 * c);
            let b = img.get(2 * r, 2 * c + 1);
            let cc = img.get(2 * r + 1, 2 * c);
            let d = img.get(2 * r + 1, 2 * c + 1);
            low.set(r, c, 0.5 * (a + b + cc + d));
            vhd.lh.set(r, c, 0.5 * (a - b + cc - d));
            vhd.hl.set(r, c, 0.5 * (a + b - cc - d));
            vhd.hh.set(r, c, 0.5 * (a - b - cc + d));
        }
    }
    Ok(WaveletBands { low, vhd })
}

pub fn haar_reconstruct(bands: &WaveletBands) -> Result<ImageGrid> {
    let shape = bands.low.shape();
    for p in bands.vhd.planes() {
        p.ensure_shape(shape)?;
    }
    let (oh, ow) = shape;
    let mut img = ImageGrid::zeros(oh * 2, ow * 2);
    for r in 0..oh {
        for c in 0..ow {
            let ll = bands.low.get(r, c);
            let lh = bands.vhd.lh.get(r, c);
            let hl = bands.vhd.hl.get(r, c);
            let hh = bands.vhd.hh.get(r, c);
            img.set(2 * r, 2 * c, 0.5 * (ll + lh + hl + hh));
            img.set(2 * r, 2 * c + 1, 0.5 * (ll - lh + hl - hh));
            img.set(2 * r + 1, 2 * c, 0.5 * (ll + lh - hl - hh));
            img.set(2 * r + 1, 2 * c + 1, 0.5 * (ll - lh - hl + hh));
        }
    }
    Ok(img)
}

/// Multi-level decomposition: the coarsest low-pass plus details, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarPyramid {
    pub low: ImageGrid,
    pub details: Vec<DetailBands>,
}

impl HaarPyramid {
    pub fn high_energy(&self) -> f64 {
        self.details.iter().map(DetailBands::energy).sum()
    }
}

pub fn haar_decompose_levels(img: &ImageGrid, levels: usize) -> Result<HaarPyramid> {
    if levels == 0 {
        return Err(Error::InvalidConfig("Haar levels must be >= 1".into()));
    }
    let mut low = img.clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let bands = haar_decompose(&low)?;
        low = bands.low;
        details.push(bands.vhd);
    }
    Ok(HaarPyramid { low, details })
}

pub fn haar_reconstruct_levels(pyramid: &HaarPyramid) -> Result<ImageGrid> {
    let mut low = pyramid.low.clone();
    for vhd in pyramid.details.iter().rev() {
        low = haar_reconstruct(&WaveletBands {
            low,
            vhd: vhd.clone(),
        })?;
    }
    Ok(low)
}
