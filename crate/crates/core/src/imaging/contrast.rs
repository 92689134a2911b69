use super::{Image, ImageError};

/// Linear window/level: `lo` and below map to 0, `hi` and above to full scale.
pub fn adjust_contrast(img: &Image, lo: u16, hi: u16) -> Result<Image, ImageError> {
    let max = img.bit_depth().max_value();
    if lo >= hi {
        return Err(ImageError::Parameter(format!("contrast window lo={lo} must be below hi={hi}")));
    }
    if hi > max {
        return Err(ImageError::Parameter(format!(
            "contrast window hi={hi} exceeds the {}-bit range",
            img.bit_depth().bits()
        )));
    }
    let depth = img.bit_depth();
    let span = (hi - lo) as f64;
    let full = max as f64;
    // lookup table over the full sample range keeps this exact and cheap
    let lut: Vec<u16> = (0..=max as u32)
        .map(|v| {
            let v = v as u16;
            if v <= lo {
                0
            } else if v >= hi {
                max
            } else {
                depth.quantize((v - lo) as f64 / span * full)
            }
        })
        .collect();
    let pixels = img.pixels().iter().map(|&v| lut[v as usize]).collect();
    Image::new(img.width(), img.height(), depth, pixels, img.pixel_size(), img.channel())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{BitDepth, Channel};
    use proptest::prelude::*;

    fn single(v: u16, depth: BitDepth) -> Image {
        Image::new(1, 1, depth, vec![v], 1.0, Channel::PC).unwrap()
    }

    #[test]
    fn full_window_is_identity() {
        let img = Image::from_fn(16, 16, BitDepth::Eight, 1.0, Channel::BF, |x, y| (x * 16 + y) as f64);
        assert_eq!(adjust_contrast(&img, 0, 255).unwrap(), img);
    }

    #[test]
    fn midpoint_rounds_half_away_from_zero() {
        // (150-100)/(200-100)*255 = 127.5
        let out = adjust_contrast(&single(150, BitDepth::Eight), 100, 200).unwrap();
        assert_eq!(out.get(0, 0), 128);
    }

    #[test]
    fn clamps_outside_window() {
        assert_eq!(adjust_contrast(&single(50, BitDepth::Eight), 100, 200).unwrap().get(0, 0), 0);
        assert_eq!(adjust_contrast(&single(250, BitDepth::Eight), 100, 200).unwrap().get(0, 0), 255);
    }

    #[test]
    fn rejects_bad_window() {
        assert!(adjust_contrast(&single(5, BitDepth::Eight), 10, 10).is_err());
        assert!(adjust_contrast(&single(5, BitDepth::Eight), 10, 300).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_input(lo in 0u16..60000, span in 1u16..5000, a in 0u16..=65535, b in 0u16..=65535) {
            let hi = lo.saturating_add(span);
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let ia = adjust_contrast(&single(a, BitDepth::Sixteen), lo, hi).unwrap().get(0, 0);
            let ib = adjust_contrast(&single(b, BitDepth::Sixteen), lo, hi).unwrap().get(0, 0);
            prop_assert!(ia <= ib);
        }
    }
}
