//! Binary occlusion masks and mask-ratio buckets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::imageio::{self, ImageIoError};

pub const SMALL_UPPER: f64 = 0.20;
pub const MEDIUM_UPPER: f64 = 0.50;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("mask raster is empty")]
    EmptyRaster,
    #[error("mask ratio {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("mask is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    ShapeMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("unknown bucket {0:?}")]
    UnknownBucket(String),
    #[error(transparent)]
    Image(#[from] ImageIoError),
}

/// Mask-ratio bucket. Ordered small < medium < large.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Small,
    Medium,
    Large,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Small, Bucket::Medium, Bucket::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Small => "small",
            Bucket::Medium => "medium",
            Bucket::Large => "large",
        }
    }

    /// Whether `ratio` maps to this bucket under [`bucket_of`].
    pub fn contains(self, ratio: f64) -> bool {
        matches!(bucket_of(ratio), Ok(b) if b == self)
    }

    /// Human label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Bucket::Small => "small (<20%)",
            Bucket::Medium => "medium (20-50%)",
            Bucket::Large => "large (>50%)",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Bucket {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(Bucket::Small),
            "medium" => Ok(Bucket::Medium),
            "large" => Ok(Bucket::Large),
            other => Err(MaskError::UnknownBucket(other.to_string())),
        }
    }
}

/// Maps an occluded-area ratio to its bucket. 0.20 and 0.50 are medium.
pub fn bucket_of(ratio: f64) -> Result<Bucket, MaskError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MaskError::OutOfRange(ratio));
    }
    Ok(if ratio < SMALL_UPPER {
        Bucket::Small
    } else if ratio <= MEDIUM_UPPER {
        Bucket::Medium
    } else {
        Bucket::Large
    })
}

/// Single-channel binary raster, row-major, 1 = occluded.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("ones", &self.count_ones())
            .finish()
    }
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![1; width as usize * height as usize],
        }
    }

    /// Builds a mask from row-major values; any non-zero value is occluded.
    pub fn from_values(width: u32, height: u32, values: &[u8]) -> Option<Self> {
        if values.len() != width as usize * height as usize {
            return None;
        }
        Some(Self {
            width,
            height,
            bits: values.iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, occluded: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = u8::from(occluded);
    }

    /// Marks `[x0, x1)` on row `y` as occluded.
    pub fn fill_span(&mut self, y: u32, x0: u32, x1: u32) {
        let row = y as usize * self.width as usize;
        self.bits[row + x0 as usize..row + x1 as usize].fill(1);
    }

    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32) {
        let x1 = (x + w).min(self.width);
        for row in y..(y + h).min(self.height) {
            self.fill_span(row, x.min(x1), x1);
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Occluded pixel count inside the half-open rectangle `[x, x+w) × [y, y+h)`.
    pub fn count_ones_in(&self, x: u32, y: u32, w: u32, h: u32) -> usize {
        let x1 = (x + w).min(self.width) as usize;
        let x0 = (x as usize).min(x1);
        (y..(y + h).min(self.height))
            .map(|row| {
                let base = row as usize * self.width as usize;
                self.bits[base + x0..base + x1]
                    .iter()
                    .filter(|&&b| b != 0)
                    .count()
            })
            .sum()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn check_dims(&self, width: u32, height: u32) -> Result<(), MaskError> {
        if (self.width, self.height) != (width, height) {
            return Err(MaskError::ShapeMismatch {
                got_w: self.width,
                got_h: self.height,
                want_w: width,
                want_h: height,
            });
        }
        Ok(())
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Encodes as a single-channel 0/255 PNG.
    pub fn to_png(&self) -> Result<Vec<u8>, MaskError> {
        Ok(imageio::encode_png(&DynamicImage::ImageLuma8(
            self.to_gray(),
        ))?)
    }

    /// Decodes a PNG; pixels with luma ≥ 128 are occluded.
    pub fn from_png(bytes: &[u8]) -> Result<Self, MaskError> {
        let gray = imageio::decode(bytes)?.to_luma8();
        let (width, height) = gray.dimensions();
        Ok(Self {
            width,
            height,
            bits: gray.pixels().map(|p| u8::from(p.0[0] >= 128)).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        Self::from_png(&imageio::read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), MaskError> {
        Ok(imageio::write_file(path, &self.to_png()?)?)
    }
}

/// Fraction of occluded pixels over the full raster area.
pub fn compute_mask_ratio(mask: &Mask) -> Result<f64, MaskError> {
    if mask.is_empty() {
        return Err(MaskError::EmptyRaster);
    }
    Ok(mask.count_ones() as f64 / mask.bits.len() as f64)
}
