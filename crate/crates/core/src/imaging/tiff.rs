//! Baseline grayscale TIFF, one image per file.
//!
//! Files are written little-endian, uncompressed, as a single strip. Channel and
//! pixel size are stored in `ImageDescription` as `key=value` pairs so that a
//! round trip restores the full [`Image`]. The reader accepts either byte order
//! and any strip layout but rejects anything that is not uncompressed,
//! single-sample, unsigned 8 or 16 bit grayscale.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{BitDepth, Channel, Image};

const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_IMAGE_DESCRIPTION: u16 = 270;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_X_RESOLUTION: u16 = 282;
const TAG_Y_RESOLUTION: u16 = 283;
const TAG_PLANAR_CONFIGURATION: u16 = 284;
const TAG_RESOLUTION_UNIT: u16 = 296;
const TAG_SAMPLE_FORMAT: u16 = 339;

const TYPE_ASCII: u16 = 2;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;
const TYPE_RATIONAL: u16 = 5;

#[derive(Debug, Error)]
pub enum TiffError {
    #[error("TIFF format error in {field}: {reason}")]
    Format { field: &'static str, reason: String },
    #[error("TIFF I/O error: {0}")]
    Io(#[from] io::Error),
}

fn format_err(field: &'static str, reason: impl Into<String>) -> TiffError {
    TiffError::Format {
        field,
        reason: reason.into(),
    }
}

struct Entry {
    tag: u16,
    kind: u16,
    count: u32,
    /// inline value or offset, already encoded little-endian
    value: [u8; 4],
}

fn inline_short(tag: u16, v: u16) -> Entry {
    let mut value = [0u8; 4];
    value[..2].copy_from_slice(&v.to_le_bytes());
    Entry {
        tag,
        kind: TYPE_SHORT,
        count: 1,
        value,
    }
}

fn inline_long(tag: u16, v: u32) -> Entry {
    Entry {
        tag,
        kind: TYPE_LONG,
        count: 1,
        value: v.to_le_bytes(),
    }
}

fn offset_entry(tag: u16, kind: u16, count: u32, offset: u32) -> Entry {
    Entry {
        tag,
        kind,
        count,
        value: offset.to_le_bytes(),
    }
}

/// Pixels-per-centimetre rational for a micrometre pixel size (display only).
fn resolution_rational(pixel_size_um: f64) -> (u32, u32) {
    let px_per_cm = 10_000.0 / pixel_size_um;
    let den = 1000u32;
    let num = (px_per_cm * den as f64).round().clamp(1.0, u32::MAX as f64) as u32;
    (num, den)
}

fn description(img: &Image) -> String {
    format!("channel={} pixel_size_um={}", img.channel(), img.pixel_size())
}

/// Encode an image to baseline TIFF bytes.
pub fn encode_tiff(img: &Image) -> Vec<u8> {
    let bps: u16 = img.bit_depth().bits() as u16;
    let bytes_per_sample = (bps / 8) as usize;
    let pixel_bytes = img.width() * img.height() * bytes_per_sample;

    let mut desc = description(img).into_bytes();
    desc.push(0);
    let (res_num, res_den) = resolution_rational(img.pixel_size());

    const N_ENTRIES: usize = 13;
    let ifd_offset = 8usize;
    let ifd_len = 2 + N_ENTRIES * 12 + 4;
    let desc_offset = ifd_offset + ifd_len;
    let xres_offset = desc_offset + desc.len() + (desc.len() & 1);
    let yres_offset = xres_offset + 8;
    let data_offset = yres_offset + 8;

    let entries = [
        inline_long(TAG_IMAGE_WIDTH, img.width() as u32),
        inline_long(TAG_IMAGE_LENGTH, img.height() as u32),
        inline_short(TAG_BITS_PER_SAMPLE, bps),
        inline_short(TAG_COMPRESSION, 1),
        inline_short(TAG_PHOTOMETRIC, 1),
        offset_entry(TAG_IMAGE_DESCRIPTION, TYPE_ASCII, desc.len() as u32, desc_offset as u32),
        inline_long(TAG_STRIP_OFFSETS, data_offset as u32),
        inline_short(TAG_SAMPLES_PER_PIXEL, 1),
        inline_long(TAG_ROWS_PER_STRIP, img.height() as u32),
        inline_long(TAG_STRIP_BYTE_COUNTS, pixel_bytes as u32),
        offset_entry(TAG_X_RESOLUTION, TYPE_RATIONAL, 1, xres_offset as u32),
        offset_entry(TAG_Y_RESOLUTION, TYPE_RATIONAL, 1, yres_offset as u32),
        inline_short(TAG_RESOLUTION_UNIT, 3),
    ];
    debug_assert_eq!(entries.len(), N_ENTRIES);

    let mut out = Vec::with_capacity(data_offset + pixel_bytes);
    out.extend_from_slice(b"II");
    out.extend_from_slice(&42u16.to_le_bytes());
    out.extend_from_slice(&(ifd_offset as u32).to_le_bytes());
    out.extend_from_slice(&(N_ENTRIES as u16).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&e.tag.to_le_bytes());
        out.extend_from_slice(&e.kind.to_le_bytes());
        out.extend_from_slice(&e.count.to_le_bytes());
        out.extend_from_slice(&e.value);
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&desc);
    if desc.len() & 1 == 1 {
        out.push(0);
    }
    for _ in 0..2 {
        out.extend_from_slice(&res_num.to_le_bytes());
        out.extend_from_slice(&res_den.to_le_bytes());
    }
    debug_assert_eq!(out.len(), data_offset);
    match img.bit_depth() {
        BitDepth::Eight => out.extend(img.pixels().iter().map(|&v| v as u8)),
        BitDepth::Sixteen => {
            for &v in img.pixels() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn save_tiff(img: &Image, path: impl AsRef<Path>) -> Result<(), TiffError> {
    fs::write(path, encode_tiff(img))?;
    Ok(())
}

pub fn load_tiff(path: impl AsRef<Path>) -> Result<Image, TiffError> {
    let bytes = fs::read(path)?;
    decode_tiff(&bytes)
}

#[derive(Clone, Copy)]
enum Order {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    order: Order,
}

impl<'a> Reader<'a> {
    fn slice(&self, offset: usize, len: usize, field: &'static str) -> Result<&'a [u8], TiffError> {
        offset
            .checked_add(len)
            .and_then(|end| self.bytes.get(offset..end))
            .ok_or_else(|| format_err(field, format!("{len} bytes at offset {offset} beyond end of file ({} bytes)", self.bytes.len())))
    }

    fn u16_at(&self, offset: usize, field: &'static str) -> Result<u16, TiffError> {
        let b = self.slice(offset, 2, field)?;
        Ok(match self.order {
            Order::Little => u16::from_le_bytes([b[0], b[1]]),
            Order::Big => u16::from_be_bytes([b[0], b[1]]),
        })
    }

    fn u32_at(&self, offset: usize, field: &'static str) -> Result<u32, TiffError> {
        let b = self.slice(offset, 4, field)?;
        let a = [b[0], b[1], b[2], b[3]];
        Ok(match self.order {
            Order::Little => u32::from_le_bytes(a),
            Order::Big => u32::from_be_bytes(a),
        })
    }
}

struct RawEntry {
    kind: u16,
    count: u32,
    /// file offset of the 4-byte value/offset field
    field_pos: usize,
}

impl RawEntry {
    fn type_size(&self) -> Option<usize> {
        match self.kind {
            1 | 2 | 6 | 7 => Some(1),
            3 | 8 => Some(2),
            4 | 9 | 11 => Some(4),
            5 | 10 | 12 => Some(8),
            _ => None,
        }
    }

    fn data_pos(&self, r: &Reader<'_>, field: &'static str) -> Result<usize, TiffError> {
        let size = self
            .type_size()
            .ok_or_else(|| format_err(field, format!("unknown field type {}", self.kind)))?;
        let total = size * self.count as usize;
        if total <= 4 {
            Ok(self.field_pos)
        } else {
            Ok(r.u32_at(self.field_pos, field)? as usize)
        }
    }

    fn values(&self, r: &Reader<'_>, field: &'static str) -> Result<Vec<u32>, TiffError> {
        let pos = self.data_pos(r, field)?;
        let n = self.count as usize;
        match self.kind {
            TYPE_SHORT => (0..n).map(|i| r.u16_at(pos + 2 * i, field).map(u32::from)).collect(),
            TYPE_LONG => (0..n).map(|i| r.u32_at(pos + 4 * i, field)).collect(),
            1 => Ok(r.slice(pos, n, field)?.iter().map(|&b| b as u32).collect()),
            other => Err(format_err(field, format!("expected an integer field, found type {other}"))),
        }
    }

    fn single(&self, r: &Reader<'_>, field: &'static str) -> Result<u32, TiffError> {
        let v = self.values(r, field)?;
        v.first()
            .copied()
            .ok_or_else(|| format_err(field, "empty value"))
    }
}

fn parse_description(text: &str) -> (Option<Channel>, Option<f64>) {
    let mut channel = None;
    let mut pixel_size = None;
    for token in text.split_whitespace() {
        if let Some((k, v)) = token.split_once('=') {
            match k {
                "channel" => channel = v.parse().ok(),
                "pixel_size_um" => pixel_size = v.parse::<f64>().ok().filter(|p| p.is_finite() && *p > 0.0),
                _ => {}
            }
        }
    }
    (channel, pixel_size)
}

/// Decode a baseline grayscale TIFF. Never returns a partially filled image.
pub fn decode_tiff(bytes: &[u8]) -> Result<Image, TiffError> {
    if bytes.len() < 8 {
        return Err(format_err("header", format!("file is {} bytes, shorter than the 8-byte header", bytes.len())));
    }
    let order = match &bytes[..2] {
        b"II" => Order::Little,
        b"MM" => Order::Big,
        _ => return Err(format_err("header", "missing II/MM byte-order mark")),
    };
    let r = Reader { bytes, order };
    if r.u16_at(2, "header")? != 42 {
        return Err(format_err("header", "magic number is not 42 (BigTIFF is unsupported)"));
    }
    let ifd = r.u32_at(4, "header")? as usize;
    let n_entries = r.u16_at(ifd, "IFD")? as usize;
    r.slice(ifd + 2, n_entries * 12, "IFD")?;

    let mut entries = std::collections::BTreeMap::new();
    for i in 0..n_entries {
        let base = ifd + 2 + i * 12;
        let tag = r.u16_at(base, "IFD")?;
        entries.insert(
            tag,
            RawEntry {
                kind: r.u16_at(base + 2, "IFD")?,
                count: r.u32_at(base + 4, "IFD")?,
                field_pos: base + 8,
            },
        );
    }
    let required = |tag: u16, field: &'static str| entries.get(&tag).ok_or_else(|| format_err(field, "required tag missing"));

    let width = required(TAG_IMAGE_WIDTH, "ImageWidth")?.single(&r, "ImageWidth")? as usize;
    let height = required(TAG_IMAGE_LENGTH, "ImageLength")?.single(&r, "ImageLength")? as usize;
    if width == 0 || height == 0 {
        return Err(format_err("ImageWidth", format!("degenerate size {width}x{height}")));
    }
    let bps = match entries.get(&TAG_BITS_PER_SAMPLE) {
        Some(e) => e.values(&r, "BitsPerSample")?,
        None => vec![1],
    };
    let depth = match bps.as_slice() {
        [8] => BitDepth::Eight,
        [16] => BitDepth::Sixteen,
        other => return Err(format_err("BitsPerSample", format!("unsupported {other:?}; need 8 or 16"))),
    };
    if let Some(e) = entries.get(&TAG_COMPRESSION) {
        let c = e.single(&r, "Compression")?;
        if c != 1 {
            return Err(format_err("Compression", format!("scheme {c} unsupported; only uncompressed (1)")));
        }
    }
    let photometric = required(TAG_PHOTOMETRIC, "PhotometricInterpretation")?.single(&r, "PhotometricInterpretation")?;
    if photometric != 1 {
        return Err(format_err(
            "PhotometricInterpretation",
            format!("value {photometric} unsupported; only BlackIsZero grayscale (1)"),
        ));
    }
    if let Some(e) = entries.get(&TAG_SAMPLES_PER_PIXEL) {
        let spp = e.single(&r, "SamplesPerPixel")?;
        if spp != 1 {
            return Err(format_err("SamplesPerPixel", format!("{spp} samples; only single-channel supported")));
        }
    }
    if let Some(e) = entries.get(&TAG_SAMPLE_FORMAT) {
        let sf = e.single(&r, "SampleFormat")?;
        if sf != 1 {
            return Err(format_err("SampleFormat", format!("format {sf} unsupported; only unsigned integer (1)")));
        }
    }
    if let Some(e) = entries.get(&TAG_PLANAR_CONFIGURATION) {
        let pc = e.single(&r, "PlanarConfiguration")?;
        if pc != 1 {
            return Err(format_err("PlanarConfiguration", format!("value {pc} unsupported")));
        }
    }

    let offsets = required(TAG_STRIP_OFFSETS, "StripOffsets")?.values(&r, "StripOffsets")?;
    let counts = required(TAG_STRIP_BYTE_COUNTS, "StripByteCounts")?.values(&r, "StripByteCounts")?;
    if offsets.len() != counts.len() {
        return Err(format_err(
            "StripByteCounts",
            format!("{} counts for {} strip offsets", counts.len(), offsets.len()),
        ));
    }
    let bytes_per_sample = depth.bits() as usize / 8;
    let needed = width * height * bytes_per_sample;
    let mut data = Vec::with_capacity(needed);
    for (&off, &count) in offsets.iter().zip(&counts) {
        data.extend_from_slice(r.slice(off as usize, count as usize, "StripOffsets")?);
    }
    if data.len() < needed {
        return Err(format_err(
            "StripByteCounts",
            format!("strips hold {} bytes, image needs {needed}", data.len()),
        ));
    }

    let pixels: Vec<u16> = match depth {
        BitDepth::Eight => data[..needed].iter().map(|&b| b as u16).collect(),
        BitDepth::Sixteen => data[..needed]
            .chunks_exact(2)
            .map(|c| match order {
                Order::Little => u16::from_le_bytes([c[0], c[1]]),
                Order::Big => u16::from_be_bytes([c[0], c[1]]),
            })
            .collect(),
    };

    let (channel, pixel_size) = match entries.get(&TAG_IMAGE_DESCRIPTION) {
        Some(e) if e.kind == TYPE_ASCII => {
            let pos = e.data_pos(&r, "ImageDescription")?;
            let raw = r.slice(pos, e.count as usize, "ImageDescription")?;
            let text = String::from_utf8_lossy(raw);
            parse_description(text.trim_end_matches('\0'))
        }
        _ => (None, None),
    };

    Image::new(
        width,
        height,
        depth,
        pixels,
        pixel_size.unwrap_or(1.0),
        channel.unwrap_or(Channel::BF),
    )
    .map_err(|e| format_err("pixels", e.to_string()))
}
