use super::{FloatImage, Image, Translation};

const EDGE_EPS: f64 = 1e-9;

/// Bilinear sample at continuous pixel coordinates; `None` outside the
/// sampled support `[0, w-1] x [0, h-1]`.
#[inline]
pub fn sample_bilinear(img: &FloatImage, x: f64, y: f64) -> Option<f64> {
    let w = img.width;
    let h = img.height;
    if w == 0 || h == 0 {
        return None;
    }
    if x < -EDGE_EPS || y < -EDGE_EPS || x > (w - 1) as f64 + EDGE_EPS || y > (h - 1) as f64 + EDGE_EPS {
        return None;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let v00 = img.get(x0, y0) as f64;
    if fx == 0.0 && fy == 0.0 {
        return Some(v00);
    }
    let v10 = img.get(x1, y0) as f64;
    let v01 = img.get(x0, y1) as f64;
    let v11 = img.get(x1, y1) as f64;
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    Some(top + (bottom - top) * fy)
}

fn is_integral(v: f64) -> bool {
    (v - v.round()).abs() < 1e-12
}

/// Shift content by `t` into an `out_w x out_h` canvas. Output pixel `(x, y)`
/// takes the input at `(x - dx, y - dy)`; uncovered pixels are 0.
fn warp_into(src: &FloatImage, t: Translation, out_w: usize, out_h: usize) -> FloatImage {
    let mut out = FloatImage::new(out_w, out_h);
    if is_integral(t.dx) && is_integral(t.dy) {
        let dx = t.dx.round() as i64;
        let dy = t.dy.round() as i64;
        for y in 0..out_h {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= src.height as i64 {
                continue;
            }
            for x in 0..out_w {
                let sx = x as i64 - dx;
                if sx < 0 || sx >= src.width as i64 {
                    continue;
                }
                out.data[y * out_w + x] = src.data[sy as usize * src.width + sx as usize];
            }
        }
        return out;
    }
    for y in 0..out_h {
        let sy = y as f64 - t.dy;
        for x in 0..out_w {
            if let Some(v) = sample_bilinear(src, x as f64 - t.dx, sy) {
                out.data[y * out_w + x] = v as f32;
            }
        }
    }
    out
}

pub fn warp_translate_float(img: &FloatImage, t: Translation) -> FloatImage {
    warp_into(img, t, img.width, img.height)
}

/// Translate an image by a sub-pixel amount with bilinear interpolation and
/// zero fill. Integer shifts are exact.
pub fn warp_translate(img: &Image, t: Translation) -> Image {
    warp_translate_resized(img, t, img.width(), img.height())
}

/// Like [`warp_translate`] but writes into a canvas of the given size.
pub fn warp_translate_resized(img: &Image, t: Translation, out_w: usize, out_h: usize) -> Image {
    let warped = warp_into(&img.to_float(), t, out_w, out_h);
    warped.quantize(img.bit_depth(), img.pixel_size(), img.channel())
}
