//! 8-bit PNG previews of 16-bit frames.

use std::io::Cursor;

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};
use tilescope::imaging::{adjust_contrast, Image};

/// Display window in sample levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub lo: u16,
    pub hi: u16,
}

/// Window spanning the image's own minimum and maximum.
pub fn auto_window(img: &Image) -> Option<Window> {
    let lo = *img.pixels().iter().min()?;
    let hi = *img.pixels().iter().max()?;
    (lo < hi).then_some(Window { lo, hi })
}

/// Window `img` (automatically when `window` is `None`) and encode it as an
/// 8-bit grayscale PNG.
pub fn render_png(img: &Image, window: Option<Window>) -> Result<Vec<u8>, String> {
    let max = img.bit_depth().max_value() as u32;
    let stretched = match window.or_else(|| auto_window(img)) {
        Some(w) => adjust_contrast(img, w.lo, w.hi).map_err(|e| e.to_string())?,
        None => img.clone(),
    };
    let bytes: Vec<u8> = stretched
        .pixels()
        .iter()
        .map(|&v| ((v as u32 * 255 + max / 2) / max) as u8)
        .collect();
    let gray = GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| "pixel buffer does not match the image size".to_string())?;
    let mut out = Cursor::new(Vec::new());
    gray.write_to(&mut out, ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tilescope::imaging::{BitDepth, Channel};

    #[test]
    fn window_maps_to_full_byte_range() {
        let img = Image::from_fn(4, 1, BitDepth::Sixteen, 1.0, Channel::PC, |x, _| 1000.0 + 100.0 * x as f64);
        let png = render_png(&img, Some(Window { lo: 1000, hi: 1300 })).unwrap();
        let decoded = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(decoded.as_raw(), &vec![0, 85, 170, 255]);
    }

    #[test]
    fn flat_image_renders_without_window() {
        let img = Image::from_fn(3, 3, BitDepth::Eight, 1.0, Channel::BF, |_, _| 51.0);
        let png = render_png(&img, None).unwrap();
        let decoded = image::load_from_memory(&png).unwrap().to_luma8();
        assert!(decoded.as_raw().iter().all(|&v| v == 51));
    }
}
