//! Illumination flattening: average reference tiles into a background and
//! subtract it (re-centred on its mean) from acquired tiles.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imaging::tiff::{load_tiff, save_tiff, TiffError};
use crate::imaging::{gaussian_blur, BitDepth, Channel, FloatImage, Image};

#[derive(Debug, Error)]
pub enum FlatFieldError {
    #[error("invalid flattening input: {0}")]
    Parameter(String),
    #[error(transparent)]
    Tiff(#[from] TiffError),
    #[error("flattening metadata {path}: {reason}")]
    Metadata { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Acquisition conditions a flat field is valid for.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFieldMeta {
    pub objective: String,
    pub exposure_ms: f64,
    pub illumination: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatField {
    background: FloatImage,
    mean: f64,
    /// Background samples are multiples of 1/scale (the 16-bit storage grid).
    scale: f64,
    pub channel: Channel,
    pub meta: FlatFieldMeta,
    pub source_depth: BitDepth,
    pub n_source_tiles: usize,
}

fn storage_scale(depth: BitDepth) -> f64 {
    match depth {
        BitDepth::Eight => 256.0,
        BitDepth::Sixteen => 1.0,
    }
}

pub fn create_flattening(tiles: &[Image], meta: FlatFieldMeta) -> Result<FlatField, FlatFieldError> {
    create_flattening_smoothed(tiles, meta, 0.0)
}

/// Pixelwise mean of `tiles`, optionally Gaussian-smoothed (`sigma_px > 0`).
pub fn create_flattening_smoothed(tiles: &[Image], meta: FlatFieldMeta, sigma_px: f64) -> Result<FlatField, FlatFieldError> {
    let first = tiles
        .first()
        .ok_or_else(|| FlatFieldError::Parameter("no reference tiles".into()))?;
    for (i, t) in tiles.iter().enumerate() {
        if t.dims() != first.dims() {
            return Err(FlatFieldError::Parameter(format!(
                "tile {i} is {}x{}, expected {}x{}",
                t.width(),
                t.height(),
                first.width(),
                first.height()
            )));
        }
        if t.channel() != first.channel() {
            return Err(FlatFieldError::Parameter(format!(
                "tile {i} is {} but tile 0 is {}",
                t.channel(),
                first.channel()
            )));
        }
        if t.bit_depth() != first.bit_depth() {
            return Err(FlatFieldError::Parameter(format!("tile {i} has a different bit depth")));
        }
    }
    let (w, h) = first.dims();
    let mut sum = vec![0u64; w * h];
    for t in tiles {
        for (s, &v) in sum.iter_mut().zip(t.pixels()) {
            *s += v as u64;
        }
    }
    let n = tiles.len() as f64;
    let mut bg = FloatImage {
        width: w,
        height: h,
        data: sum.iter().map(|&s| (s as f64 / n) as f32).collect(),
    };
    if sigma_px > 0.0 {
        bg = gaussian_blur(&bg, sigma_px);
    }
    let scale = storage_scale(first.bit_depth());
    // snap to the persisted representation so saved and in-memory fields agree
    for v in bg.data.iter_mut() {
        *v = (BitDepth::Sixteen.quantize(*v as f64 * scale) as f64 / scale) as f32;
    }
    Ok(FlatField::from_parts(bg, scale, first.channel(), meta, first.bit_depth(), tiles.len()))
}

impl FlatField {
    fn from_parts(
        background: FloatImage,
        scale: f64,
        channel: Channel,
        meta: FlatFieldMeta,
        source_depth: BitDepth,
        n_source_tiles: usize,
    ) -> Self {
        let mean = background.mean();
        Self {
            background,
            mean,
            scale,
            channel,
            meta,
            source_depth,
            n_source_tiles,
        }
    }

    pub fn background(&self) -> &FloatImage {
        &self.background
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.background.width, self.background.height)
    }

    /// Mismatches between this field's conditions and an image's; empty when compatible.
    pub fn compatibility_warnings(&self, channel: Channel, objective: &str, exposure_ms: f64) -> Vec<String> {
        let mut w = Vec::new();
        if channel != self.channel {
            w.push(format!("flat field is for {} but the image is {channel}", self.channel));
        }
        if objective != self.meta.objective {
            w.push(format!(
                "flat field was recorded with objective {} but the image uses {objective}",
                self.meta.objective
            ));
        }
        if (exposure_ms - self.meta.exposure_ms).abs() > 1e-9 {
            w.push(format!(
                "flat field exposure {} ms differs from image exposure {exposure_ms} ms",
                self.meta.exposure_ms
            ));
        }
        w
    }

    pub fn file_stem(channel: Channel, objective: &str) -> String {
        let obj: String = objective
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' })
            .collect();
        format!("flat_{channel}_{obj}")
    }

    /// Write `<dir>/flat_{CH}_{objective}.tif` and its `.txt` sidecar; returns the TIFF path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, FlatFieldError> {
        fs::create_dir_all(dir).map_err(|source| FlatFieldError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let stem = Self::file_stem(self.channel, &self.meta.objective);
        let tif = dir.join(format!("{stem}.tif"));
        let (w, h) = self.dims();
        let pixels = self
            .background
            .data
            .iter()
            .map(|&v| BitDepth::Sixteen.quantize(v as f64 * self.scale))
            .collect();
        let img = Image::new(w, h, BitDepth::Sixteen, pixels, 1.0, self.channel)
            .map_err(|e| FlatFieldError::Parameter(e.to_string()))?;
        save_tiff(&img, &tif)?;
        let mut side = String::new();
        let _ = writeln!(side, "channel: {}", self.channel);
        let _ = writeln!(side, "objective: {}", self.meta.objective);
        let _ = writeln!(side, "exposure_ms: {}", self.meta.exposure_ms);
        let _ = writeln!(side, "illumination: {}", self.meta.illumination);
        let _ = writeln!(side, "n_source_tiles: {}", self.n_source_tiles);
        let _ = writeln!(side, "source_bit_depth: {}", self.source_depth.bits());
        let _ = writeln!(side, "storage_scale: {}", self.scale);
        let _ = writeln!(side, "width: {w}");
        let _ = writeln!(side, "height: {h}");
        let _ = writeln!(side, "mean: {}", self.mean);
        let txt = tif.with_extension("txt");
        fs::write(&txt, side).map_err(|source| FlatFieldError::Io { path: txt, source })?;
        Ok(tif)
    }

    /// Load a flat field from its TIFF path; the sidecar must sit beside it.
    pub fn load(tif: &Path) -> Result<Self, FlatFieldError> {
        let img = load_tiff(tif)?;
        let txt = tif.with_extension("txt");
        let text = fs::read_to_string(&txt).map_err(|source| FlatFieldError::Io {
            path: txt.clone(),
            source,
        })?;
        let meta_err = |reason: String| FlatFieldError::Metadata {
            path: txt.clone(),
            reason,
        };
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| meta_err(format!("line {line:?} is not key: value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| meta_err(format!("missing key {k}")));
        let num = |k: &str| -> Result<f64, FlatFieldError> {
            get(k)?.parse::<f64>().map_err(|e| meta_err(format!("{k}: {e}")))
        };
        let channel: Channel = get("channel")?.parse().map_err(|e| meta_err(format!("channel: {e}")))?;
        let depth = BitDepth::try_from(num("source_bit_depth")? as u8).map_err(|e| meta_err(e.to_string()))?;
        let scale = num("storage_scale")?;
        let n = num("n_source_tiles")? as usize;
        let meta = FlatFieldMeta {
            objective: get("objective")?,
            exposure_ms: num("exposure_ms")?,
            illumination: num("illumination")?,
        };
        let bg = FloatImage {
            width: img.width(),
            height: img.height(),
            data: img.pixels().iter().map(|&v| (v as f64 / scale) as f32).collect(),
        };
        Ok(Self::from_parts(bg, scale, channel, meta, depth, n))
    }
}

/// `clamp(img - background + mean(background))` at the image's bit depth.
pub fn apply_flattening(img: &Image, ff: &FlatField) -> Result<Image, FlatFieldError> {
    if img.dims() != ff.dims() {
        return Err(FlatFieldError::Parameter(format!(
            "image is {}x{} but the flat field is {}x{}",
            img.width(),
            img.height(),
            ff.dims().0,
            ff.dims().1
        )));
    }
    let depth = img.bit_depth();
    let pixels = img
        .pixels()
        .iter()
        .zip(&ff.background.data)
        .map(|(&v, &b)| depth.quantize(v as f64 - b as f64 + ff.mean))
        .collect();
    Image::new(img.width(), img.height(), depth, pixels, img.pixel_size(), img.channel())
        .map_err(|e| FlatFieldError::Parameter(e.to_string()))
}
