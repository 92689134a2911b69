//! Raster types shared by every stage of the pipeline.
//!
//! [`Image`] is the quantized, persisted form (8 or 16 bit samples plus pixel
//! size and channel metadata). [`FloatImage`] is the floating intermediate used
//! by registration, correction and simulation code; it is quantized only when an
//! [`Image`] is produced.

mod contrast;
mod filter;
pub mod tiff;
mod warp;

use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use contrast::adjust_contrast;
pub use filter::{gaussian_blur, gaussian_kernel};
pub use tiff::{load_tiff, save_tiff, TiffError};
pub use warp::{sample_bilinear, warp_translate, warp_translate_float, warp_translate_resized};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("pixel buffer has {actual} samples, expected {expected} ({width}x{height})")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("sample value {value} exceeds the {bits}-bit maximum")]
    SampleRange { value: u32, bits: u8 },
    #[error("pixel size must be positive and finite, got {0}")]
    PixelSize(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Imaging modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// Bright field.
    BF,
    /// Phase contrast.
    PC,
    /// Fluorescence.
    FL,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::BF, Channel::PC, Channel::FL];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::BF => "BF",
            Channel::PC => "PC",
            Channel::FL => "FL",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "BF" => Ok(Channel::BF),
            "PC" => Ok(Channel::PC),
            "FL" => Ok(Channel::FL),
            other => Err(ImageError::Parameter(format!("unknown channel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }

    pub fn max_value(self) -> u16 {
        match self {
            BitDepth::Eight => u8::MAX as u16,
            BitDepth::Sixteen => u16::MAX,
        }
    }

    /// Round half away from zero and clamp into the representable range.
    pub fn quantize(self, v: f64) -> u16 {
        if !v.is_finite() || v <= 0.0 {
            return 0;
        }
        let r = v.round();
        let max = self.max_value() as f64;
        if r >= max {
            self.max_value()
        } else {
            r as u16
        }
    }
}

impl TryFrom<u8> for BitDepth {
    type Error = String;

    fn try_from(bits: u8) -> Result<Self, Self::Error> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(format!("bit depth must be 8 or 16, got {other}")),
        }
    }
}

impl From<BitDepth> for u8 {
    fn from(d: BitDepth) -> u8 {
        d.bits()
    }
}

/// Signed sub-pixel displacement in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Translation {
    pub dx: f64,
    pub dy: f64,
}

impl Translation {
    pub const ZERO: Translation = Translation { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn is_finite(self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.dx * s, self.dy * s)
    }
}

impl Add for Translation {
    type Output = Translation;
    fn add(self, o: Translation) -> Translation {
        Translation::new(self.dx + o.dx, self.dy + o.dy)
    }
}

impl AddAssign for Translation {
    fn add_assign(&mut self, o: Translation) {
        self.dx += o.dx;
        self.dy += o.dy;
    }
}

impl Sub for Translation {
    type Output = Translation;
    fn sub(self, o: Translation) -> Translation {
        Translation::new(self.dx - o.dx, self.dy - o.dy)
    }
}

impl Neg for Translation {
    type Output = Translation;
    fn neg(self) -> Translation {
        Translation::new(-self.dx, -self.dy)
    }
}

/// Identifies one tile within an acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileAddress {
    pub roi_id: usize,
    pub row: usize,
    pub col: usize,
    pub timestep: usize,
    pub channel: Channel,
    pub z_index: usize,
}

/// Single-channel quantized raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    bit_depth: BitDepth,
    pixels: Vec<u16>,
    pixel_size: f64,
    channel: Channel,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        bit_depth: BitDepth,
        pixels: Vec<u16>,
        pixel_size: f64,
        channel: Channel,
    ) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::BufferSize {
                width,
                height,
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(ImageError::PixelSize(pixel_size));
        }
        let max = bit_depth.max_value();
        if let Some(&v) = pixels.iter().find(|&&v| v > max) {
            return Err(ImageError::SampleRange {
                value: v as u32,
                bits: bit_depth.bits(),
            });
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            pixels,
            pixel_size,
            channel,
        })
    }

    pub fn zeros(width: usize, height: usize, bit_depth: BitDepth, pixel_size: f64, channel: Channel) -> Self {
        Self::new(width, height, bit_depth, vec![0; width * height], pixel_size, channel)
            .expect("zero image with valid pixel size")
    }

    /// Build an image by evaluating `f(x, y)` and quantizing the result.
    pub fn from_fn(
        width: usize,
        height: usize,
        bit_depth: BitDepth,
        pixel_size: f64,
        channel: Channel,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(bit_depth.quantize(f(x, y)));
            }
        }
        Self::new(width, height, bit_depth, pixels, pixel_size, channel).expect("quantized samples are in range")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bit_depth(&self) -> BitDepth {
        self.bit_depth
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn with_channel(mut self, channel: Channel) -> Self {
        self.channel = channel;
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Copy out a sub-rectangle. The rectangle must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image, ImageError> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(ImageError::Parameter(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Image::new(w, h, self.bit_depth, pixels, self.pixel_size, self.channel)
    }
}

/// Floating-point raster used for intermediate arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn quantize(&self, bit_depth: BitDepth, pixel_size: f64, channel: Channel) -> Image {
        let pixels = self.data.iter().map(|&v| bit_depth.quantize(v as f64)).collect();
        Image::new(self.width, self.height, bit_depth, pixels, pixel_size, channel)
            .expect("quantize produces in-range samples; pixel size validated by caller")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_buffers() {
        assert!(matches!(
            Image::new(2, 2, BitDepth::Eight, vec![0; 3], 1.0, Channel::PC),
            Err(ImageError::BufferSize { .. })
        ));
        assert!(matches!(
            Image::new(1, 1, BitDepth::Eight, vec![256], 1.0, Channel::PC),
            Err(ImageError::SampleRange { value: 256, bits: 8 })
        ));
        assert!(matches!(
            Image::new(1, 1, BitDepth::Eight, vec![0], 0.0, Channel::PC),
            Err(ImageError::PixelSize(_))
        ));
    }

    #[test]
    fn quantize_rounds_half_away_and_clamps() {
        assert_eq!(BitDepth::Eight.quantize(127.5), 128);
        assert_eq!(BitDepth::Eight.quantize(127.49), 127);
        assert_eq!(BitDepth::Eight.quantize(-3.0), 0);
        assert_eq!(BitDepth::Eight.quantize(300.0), 255);
        assert_eq!(BitDepth::Sixteen.quantize(70000.0), 65535);
        assert_eq!(BitDepth::Sixteen.quantize(f64::NAN), 0);
    }

    #[test]
    fn channel_parses() {
        for ch in Channel::ALL {
            assert_eq!(ch.as_str().parse::<Channel>().unwrap(), ch);
        }
        assert!("DAPI".parse::<Channel>().is_err());
    }

    #[test]
    fn crop_extracts_rectangle() {
        let img = Image::from_fn(4, 3, BitDepth::Eight, 1.0, Channel::BF, |x, y| (y * 4 + x) as f64);
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[5, 6, 9, 10]);
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}
