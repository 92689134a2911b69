use crate::imaging::{sample_bilinear, Image};

/// Mean absolute intensity disagreement between 4-neighbour tiles where they
/// meet. Overlapping neighbours are compared over the shared area; abutting
/// neighbours across their facing edge rows or columns.
pub fn seam_metric(tiles: &[Option<&Image>], rows: usize, cols: usize, positions: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let Some(a) = tiles[i] else { continue };
            let mut neighbours = Vec::new();
            if c + 1 < cols {
                neighbours.push((i + 1, true));
            }
            if r + 1 < rows {
                neighbours.push((i + cols, false));
            }
            for (j, horizontal) in neighbours {
                let Some(b) = tiles[j] else { continue };
                let (s, n) = pair_disagreement(a, positions[i], b, positions[j], horizontal);
                total += s;
                count += n;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn pair_disagreement(a: &Image, pa: (f64, f64), b: &Image, pb: (f64, f64), horizontal: bool) -> (f64, usize) {
    let (w, h) = a.dims();
    let fa = a.to_float();
    let fb = b.to_float();
    let (dx, dy) = (pb.0 - pa.0, pb.1 - pa.1);
    let shared = if horizontal { w as f64 - dx } else { h as f64 - dy };
    let mut sum = 0.0;
    let mut n = 0;
    if shared >= 1.0 {
        // overlap: walk a's pixels and sample b at the same panorama location
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 - dx, y as f64 - dy);
                if let Some(vb) = sample_bilinear(&fb, u, v) {
                    sum += (fa.get(x, y) as f64 - vb).abs();
                    n += 1;
                }
            }
        }
    } else if horizontal {
        let off = dy.round() as i64;
        for y in 0..h as i64 {
            let yb = y - off;
            if yb >= 0 && yb < h as i64 {
                sum += (a.get(w - 1, y as usize) as f64 - b.get(0, yb as usize) as f64).abs();
                n += 1;
            }
        }
    } else {
        let off = dx.round() as i64;
        for x in 0..w as i64 {
            let xb = x - off;
            if xb >= 0 && xb < w as i64 {
                sum += (a.get(x as usize, h - 1) as f64 - b.get(xb as usize, 0) as f64).abs();
                n += 1;
            }
        }
    }
    (sum, n)
}
