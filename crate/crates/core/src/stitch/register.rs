use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GridPos, StitchError};
use crate::imaging::{Image, Translation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    /// `b` is the right-hand neighbour of `a`.
    RightOf,
    /// `b` sits directly below `a`.
    Below,
}

/// Measured displacement of `to` relative to `from`, as a residual on top of
/// the nominal grid step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOffset {
    pub from: GridPos,
    pub to: GridPos,
    pub relation: Relation,
    pub offset: Translation,
    pub confidence: f64,
}

/// Nominal origin of the neighbour relative to the reference tile, in pixels.
pub fn nominal_step(relation: Relation, width: usize, height: usize, overlap: f64) -> Translation {
    match relation {
        Relation::RightOf => Translation::new(width as f64 * (1.0 - overlap), 0.0),
        Relation::Below => Translation::new(0.0, height as f64 * (1.0 - overlap)),
    }
}

/// Normalised cross-correlation of `a` and `b` where `b`'s origin sits at
/// `(dx, dy)` in `a`'s frame. Zero-variance overlaps score 0.
fn ncc_at(a: &[f32], b: &[f32], w: usize, h: usize, dx: i64, dy: i64) -> f64 {
    let (wi, hi) = (w as i64, h as i64);
    let x0 = dx.max(0);
    let x1 = (wi + dx).min(wi);
    let y0 = dy.max(0);
    let y1 = (hi + dy).min(hi);
    if x1 - x0 < 2 || y1 - y0 < 2 {
        return 0.0;
    }
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for y in y0..y1 {
        let ra = &a[(y * wi) as usize..];
        let rb = &b[((y - dy) * wi) as usize..];
        for x in x0..x1 {
            let va = ra[x as usize] as f64;
            let vb = rb[(x - dx) as usize] as f64;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-9 * n || vb <= 1e-9 * n {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn parabola_peak(lo: f64, mid: f64, hi: f64) -> f64 {
    let denom = lo - 2.0 * mid + hi;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
}

/// Locate `b` relative to `a` by normalised cross-correlation over
/// `+-max_search` pixels around the nominal overlap.
pub fn register_pair(
    a: &Image,
    b: &Image,
    relation: Relation,
    overlap: f64,
    max_search: usize,
) -> Result<PairOffset, StitchError> {
    if a.dims() != b.dims() {
        return Err(StitchError::Parameter("tiles to register differ in size".into()));
    }
    if !(overlap > 0.0 && overlap <= 0.5) {
        return Err(StitchError::Parameter(format!("registration overlap {overlap} must lie in (0, 0.5]")));
    }
    let (w, h) = a.dims();
    let strip = match relation {
        Relation::RightOf => (w as f64 * overlap).round() as usize,
        Relation::Below => (h as f64 * overlap).round() as usize,
    };
    if strip <= max_search {
        return Err(StitchError::Parameter(format!(
            "overlap strip of {strip} px does not exceed the {max_search} px search window"
        )));
    }
    let nominal = nominal_step(relation, w, h, overlap);
    let cx = nominal.dx.round() as i64;
    let cy = nominal.dy.round() as i64;
    let s = max_search as i64;
    let side = (2 * s + 1) as usize;
    let fa = a.to_float();
    let fb = b.to_float();
    let scores: Vec<f64> = (0..side * side)
        .into_par_iter()
        .map(|k| {
            let ox = (k % side) as i64 - s;
            let oy = (k / side) as i64 - s;
            ncc_at(&fa.data, &fb.data, w, h, cx + ox, cy + oy)
        })
        .collect();
    let (best_k, &best) = scores
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
    let bx = best_k % side;
    let by = best_k / side;
    let at = |x: usize, y: usize| scores[y * side + x];
    let fx = if bx > 0 && bx + 1 < side {
        parabola_peak(at(bx - 1, by), best, at(bx + 1, by))
    } else {
        0.0
    };
    let fy = if by > 0 && by + 1 < side {
        parabola_peak(at(bx, by - 1), best, at(bx, by + 1))
    } else {
        0.0
    };
    let found = Translation::new((cx + bx as i64 - s) as f64 + fx, (cy + by as i64 - s) as f64 + fy);
    Ok(PairOffset {
        from: (0, 0),
        to: match relation {
            Relation::RightOf => (0, 1),
            Relation::Below => (1, 0),
        },
        relation,
        offset: found - nominal,
        confidence: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{BitDepth, Channel, FloatImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn texture(w: usize, h: usize, seed: u64) -> FloatImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = FloatImage::from_fn(w, h, |_, _| rng.random_range(0.0..200.0));
        crate::imaging::gaussian_blur(&raw, 1.5)
    }

    fn cut(src: &FloatImage, x0: usize, y0: usize, w: usize, h: usize, noise: f64, rng: &mut ChaCha8Rng) -> Image {
        let n = Normal::new(0.0, noise.max(1e-12)).unwrap();
        Image::from_fn(w, h, BitDepth::Sixteen, 1.0, Channel::PC, |x, y| {
            src.get(x0 + x, y0 + y) as f64 * 10.0 + if noise > 0.0 { n.sample(rng) } else { 0.0 }
        })
    }

    #[test]
    fn exact_cut_has_zero_residual() {
        let src = texture(300, 200, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = cut(&src, 20, 20, 100, 100, 0.0, &mut rng);
        let b = cut(&src, 100, 20, 100, 100, 0.0, &mut rng);
        let p = register_pair(&a, &b, Relation::RightOf, 0.2, 10).unwrap();
        assert!(p.offset.norm() < 0.05, "{:?}", p.offset);
        assert!(p.confidence > 0.999);
    }

    #[test]
    fn injected_shift_recovered() {
        let src = texture(300, 300, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = cut(&src, 30, 30, 100, 100, 0.0, &mut rng);
        let b = cut(&src, 30 + 4, 30 + 80 - 2, 100, 100, 0.0, &mut rng);
        let p = register_pair(&a, &b, Relation::Below, 0.2, 10).unwrap();
        assert!((p.offset.dx - 4.0).abs() < 0.5 && (p.offset.dy + 2.0).abs() < 0.5, "{:?}", p.offset);
    }

    #[test]
    fn noise_has_low_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Image::from_fn(100, 100, BitDepth::Sixteen, 1.0, Channel::PC, |_, _| rng.random_range(0.0..1000.0));
        let b = Image::from_fn(100, 100, BitDepth::Sixteen, 1.0, Channel::PC, |_, _| rng.random_range(0.0..1000.0));
        let p = register_pair(&a, &b, Relation::RightOf, 0.2, 10).unwrap();
        assert!(p.confidence < 0.3, "{}", p.confidence);
    }

    #[test]
    fn search_window_must_fit_in_strip() {
        let img = Image::zeros(100, 100, BitDepth::Eight, 1.0, Channel::PC);
        assert!(register_pair(&img, &img, Relation::RightOf, 0.2, 30).is_err());
        assert!(register_pair(&img, &img, Relation::RightOf, 0.6, 5).is_err());
    }
}
