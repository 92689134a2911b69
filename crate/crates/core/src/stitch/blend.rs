use crate::imaging::{sample_bilinear, FloatImage, Image};

use super::Panorama;

/// Tiles side by side at `(c * width, r * height)`. Missing tiles leave a
/// zero block; their indices are returned.
pub fn place_no_overlap(
    tiles: &[Option<&Image>],
    rows: usize,
    cols: usize,
) -> Result<(Panorama, Vec<usize>), super::StitchError> {
    let reference = tiles
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| super::StitchError::Parameter("no tiles to place".into()))?;
    if tiles.len() != rows * cols {
        return Err(super::StitchError::Parameter(format!(
            "{} tiles supplied for a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let (w, h) = reference.dims();
    let (pw, ph) = (w * cols, h * rows);
    let mut pixels = vec![0u16; pw * ph];
    let mut missing = Vec::new();
    let mut positions = Vec::with_capacity(rows * cols);
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        positions.push(((c * w) as f64, (r * h) as f64));
        let Some(tile) = tile else {
            missing.push(i);
            continue;
        };
        if tile.dims() != (w, h) {
            return Err(super::StitchError::Parameter(format!("tile {i} differs in size from the others")));
        }
        for y in 0..h {
            let dst = (r * h + y) * pw + c * w;
            pixels[dst..dst + w].copy_from_slice(&tile.pixels()[y * w..(y + 1) * w]);
        }
    }
    let image = Image::new(pw, ph, reference.bit_depth(), pixels, reference.pixel_size(), reference.channel())
        .map_err(|e| super::StitchError::Parameter(e.to_string()))?;
    Ok((Panorama::new(image, positions), missing))
}

fn feather(u: f64, len: usize) -> f64 {
    (u + 1.0).min(len as f64 - u).max(0.0)
}

/// Composite tiles at (sub-pixel) origins with linear feathering: each tile's
/// weight ramps from its edges toward its centre.
pub fn blend(tiles: &[Option<&Image>], positions: &[(f64, f64)]) -> Result<Panorama, super::StitchError> {
    if tiles.len() != positions.len() {
        return Err(super::StitchError::Parameter("one position per tile required".into()));
    }
    let placed: Vec<(usize, &Image)> = tiles.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).collect();
    let &(_, reference) = placed
        .first()
        .ok_or_else(|| super::StitchError::Parameter("no tiles to blend".into()))?;
    let (w, h) = reference.dims();
    if placed.iter().any(|(_, t)| t.dims() != (w, h)) {
        return Err(super::StitchError::Parameter("tiles differ in size".into()));
    }
    let min_x = placed.iter().map(|(i, _)| positions[*i].0).fold(f64::INFINITY, f64::min).floor();
    let min_y = placed.iter().map(|(i, _)| positions[*i].1).fold(f64::INFINITY, f64::min).floor();
    // Last pixel column/row any tile still covers.
    let max_x = placed.iter().map(|(i, _)| positions[*i].0 + (w - 1) as f64).fold(f64::NEG_INFINITY, f64::max);
    let max_y = placed.iter().map(|(i, _)| positions[*i].1 + (h - 1) as f64).fold(f64::NEG_INFINITY, f64::max);
    let pw = (max_x - min_x + 1e-9).floor() as usize + 1;
    let ph = (max_y - min_y + 1e-9).floor() as usize + 1;

    let mut acc = vec![0.0f64; pw * ph];
    let mut wsum = vec![0.0f64; pw * ph];
    for &(i, tile) in &placed {
        let ox = positions[i].0 - min_x;
        let oy = positions[i].1 - min_y;
        let src = tile.to_float();
        let x_lo = (ox - 1e-9).ceil().max(0.0) as usize;
        let y_lo = (oy - 1e-9).ceil().max(0.0) as usize;
        let x_hi = ((ox + (w - 1) as f64 + 1e-9).floor() as usize).min(pw - 1);
        let y_hi = ((oy + (h - 1) as f64 + 1e-9).floor() as usize).min(ph - 1);
        for y in y_lo..=y_hi {
            let v = y as f64 - oy;
            let wy = feather(v, h);
            for x in x_lo..=x_hi {
                let u = x as f64 - ox;
                let Some(s) = sample_bilinear(&src, u, v) else { continue };
                let wt = feather(u, w) * wy;
                acc[y * pw + x] += wt * s;
                wsum[y * pw + x] += wt;
            }
        }
    }
    let data: Vec<f32> = acc
        .iter()
        .zip(&wsum)
        .map(|(&a, &ws)| if ws > 0.0 { (a / ws) as f32 } else { 0.0 })
        .collect();
    let img = FloatImage { width: pw, height: ph, data }.quantize(
        reference.bit_depth(),
        reference.pixel_size(),
        reference.channel(),
    );
    let rel = positions.iter().map(|p| (p.0 - min_x, p.1 - min_y)).collect();
    Ok(Panorama::new(img, rel))
}
