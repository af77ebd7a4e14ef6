use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const HEIGHT: usize = 16;
pub const WIDTH: usize = 16;
pub const CHANNELS: usize = 3;
/// Number of scalar components in one image.
pub const PIXELS: usize = HEIGHT * WIDTH * CHANNELS;

/// A 16×16 RGB image, row-major HWC, every component in `[0, 1]`.
///
/// Storage is `f32` so that raw files round-trip byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct ToyImage {
    pixels: Vec<f32>,
}

impl ToyImage {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::InvalidImage(format!("expected {PIXELS} components, got {}", pixels.len())));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!("component {i} = {} outside [0,1]", pixels[i])));
        }
        Ok(Self { pixels })
    }

    pub fn zeros() -> Self {
        Self { pixels: vec![0.0; PIXELS] }
    }

    pub fn filled(value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self { pixels: vec![value; PIXELS] }
    }

    /// Clamps every component into `[0, 1]`. Non-finite inputs are rejected.
    pub fn from_f64_clamped(values: &[f64]) -> Result<Self> {
        if values.len() != PIXELS {
            return Err(Error::InvalidImage(format!("expected {PIXELS} components, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence("non-finite pixel".into()));
        }
        Ok(Self { pixels: values.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect() })
    }

    #[inline]
    pub fn index(row: usize, col: usize, ch: usize) -> usize {
        (row * WIDTH + col) * CHANNELS + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[Self::index(row, col, ch)]
    }

    #[inline]
    pub fn rgb(&self, row: usize, col: usize) -> [f64; 3] {
        let i = Self::index(row, col, 0);
        [self.pixels[i] as f64, self.pixels[i + 1] as f64, self.pixels[i + 2] as f64]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.pixels
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / PIXELS as f64
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != PIXELS * 4 {
            return Err(Error::InvalidImage(format!("expected {} bytes, got {}", PIXELS * 4, bytes.len())));
        }
        let pixels = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(pixels)
    }

    /// 8-bit RGB bytes, for previews.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

impl TryFrom<Vec<f32>> for ToyImage {
    type Error = Error;

    fn try_from(value: Vec<f32>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ToyImage> for Vec<f32> {
    fn from(value: ToyImage) -> Self {
        value.pixels
    }
}
