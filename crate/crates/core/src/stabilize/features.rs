//! Blob features (determinant of Hessian) with upright gradient-histogram
//! descriptors, and the translation-only consensus estimator built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StabilizerConfig;
use crate::imaging::{gaussian_blur, sample_bilinear, FloatImage, Image, Translation};

const SCALES: [f64; 6] = [1.2, 1.6, 2.1, 2.8, 3.7, 4.9];
/// Descriptor sample spacing relative to the detection scale.
const SPACING_PER_SIGMA: f64 = 0.8;
const GRID: usize = 16;
const CELLS: usize = 4;
const BINS: usize = 8;
pub const DESCRIPTOR_LEN: usize = CELLS * CELLS * BINS;

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub response: f64,
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub prev: (f64, f64),
    pub curr: (f64, f64),
}

impl Match {
    pub fn displacement(&self) -> Translation {
        Translation::new(self.curr.0 - self.prev.0, self.curr.1 - self.prev.1)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DriftFailure {
    #[error("tiles differ in size")]
    SizeMismatch,
    #[error("only {0} matches survived filtering")]
    TooFewMatches(usize),
    #[error("largest consistent set has {0} matches")]
    NoConsensus(usize),
}

fn normalized(img: &Image) -> FloatImage {
    let mut f = img.to_float();
    let n = f.data.len().max(1) as f64;
    let mean = f.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = f.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in f.data.iter_mut() {
        *v = if sd > 0.0 { ((*v as f64 - mean) / sd) as f32 } else { 0.0 };
    }
    f
}

struct Level {
    sigma: f64,
    smooth: FloatImage,
    response: Vec<f32>,
}

fn hessian_response(l: &FloatImage, sigma: f64) -> Vec<f32> {
    let (w, h) = (l.width, l.height);
    let mut r = vec![0.0f32; w * h];
    let s4 = sigma.powi(4);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let c = l.get(x, y) as f64;
            let lxx = l.get(x + 1, y) as f64 - 2.0 * c + l.get(x - 1, y) as f64;
            let lyy = l.get(x, y + 1) as f64 - 2.0 * c + l.get(x, y - 1) as f64;
            let lxy = (l.get(x + 1, y + 1) as f64 - l.get(x + 1, y - 1) as f64 - l.get(x - 1, y + 1) as f64
                + l.get(x - 1, y - 1) as f64)
                / 4.0;
            r[y * w + x] = (s4 * (lxx * lyy - lxy * lxy)) as f32;
        }
    }
    r
}

fn parabola(lo: f64, mid: f64, hi: f64) -> f64 {
    let d = lo - 2.0 * mid + hi;
    if d >= 0.0 {
        0.0
    } else {
        (0.5 * (lo - hi) / d).clamp(-0.5, 0.5)
    }
}

fn describe(level: &Level, x: f64, y: f64) -> Option<Vec<f32>> {
    let s = level.sigma * SPACING_PER_SIGMA;
    let mut hist = vec![0.0f32; DESCRIPTOR_LEN];
    let half = GRID as f64 / 2.0;
    let win = half / 1.5;
    for j in 0..GRID {
        for i in 0..GRID {
            let u = (i as f64 + 0.5 - half) * s;
            let v = (j as f64 + 0.5 - half) * s;
            let (px, py) = (x + u, y + v);
            let gx = sample_bilinear(&level.smooth, px + 1.0, py)? - sample_bilinear(&level.smooth, px - 1.0, py)?;
            let gy = sample_bilinear(&level.smooth, px, py + 1.0)? - sample_bilinear(&level.smooth, px, py - 1.0)?;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let di = i as f64 + 0.5 - half;
            let dj = j as f64 + 0.5 - half;
            let weight = mag * (-(di * di + dj * dj) / (2.0 * win * win)).exp();
            let angle = gy.atan2(gx) + std::f64::consts::PI;
            let pos = angle / (2.0 * std::f64::consts::PI) * BINS as f64 - 0.5;
            let b0 = pos.floor();
            let frac = pos - b0;
            let b0 = (b0 as i64).rem_euclid(BINS as i64) as usize;
            let b1 = (b0 + 1) % BINS;
            let cell = (j / (GRID / CELLS)) * CELLS + i / (GRID / CELLS);
            hist[cell * BINS + b0] += (weight * (1.0 - frac)) as f32;
            hist[cell * BINS + b1] += (weight * frac) as f32;
        }
    }
    let normalize = |h: &mut Vec<f32>| {
        let n = h.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 0.0 {
            h.iter_mut().for_each(|v| *v /= n);
        }
    };
    normalize(&mut hist);
    hist.iter_mut().for_each(|v| *v = v.min(0.2));
    normalize(&mut hist);
    Some(hist)
}

/// Strongest `max_features` blobs of `img`, strongest first.
pub fn detect_features(img: &Image, max_features: usize) -> Vec<Feature> {
    let norm = normalized(img);
    let (w, h) = (norm.width, norm.height);
    if w < 8 || h < 8 {
        return Vec::new();
    }
    let levels: Vec<Level> = SCALES
        .iter()
        .map(|&sigma| {
            let smooth = gaussian_blur(&norm, sigma);
            let response = hessian_response(&smooth, sigma);
            Level { sigma, smooth, response }
        })
        .collect();

    let mut candidates = Vec::new();
    for k in 1..levels.len() - 1 {
        let lv = &levels[k];
        let margin = (GRID as f64 / 2.0 * lv.sigma * SPACING_PER_SIGMA).ceil() as usize + 2;
        if 2 * margin >= w || 2 * margin >= h {
            continue;
        }
        for y in margin..h - margin {
            for x in margin..w - margin {
                let v = lv.response[y * w + x];
                if v <= 1e-4 {
                    continue;
                }
                let mut is_max = true;
                'scan: for kk in k - 1..=k + 1 {
                    let r = &levels[kk].response;
                    for yy in y - 1..=y + 1 {
                        for xx in x - 1..=x + 1 {
                            if (kk, yy, xx) != (k, y, x) && r[yy * w + xx] >= v {
                                is_max = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if is_max {
                    let r = &lv.response;
                    let fx = parabola(r[y * w + x - 1] as f64, v as f64, r[y * w + x + 1] as f64);
                    let fy = parabola(r[(y - 1) * w + x] as f64, v as f64, r[(y + 1) * w + x] as f64);
                    candidates.push((v as f64, k, x as f64 + fx, y as f64 + fy));
                }
            }
        }
    }
    // strongest first; position breaks ties so the order is total
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.2.total_cmp(&b.2))
            .then(a.3.total_cmp(&b.3))
    });
    candidates
        .into_iter()
        .filter_map(|(response, k, x, y)| {
            describe(&levels[k], x, y).map(|descriptor| Feature {
                x,
                y,
                sigma: levels[k].sigma,
                response,
                descriptor,
            })
        })
        .take(max_features)
        .collect()
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-descriptor matches passing the ratio test, without the
/// displacement filter.
pub fn match_features(prev: &[Feature], curr: &[Feature], ratio: f64) -> Vec<Match> {
    let mut out = Vec::new();
    if curr.len() < 2 {
        return out;
    }
    let r2 = (ratio * ratio) as f32;
    for p in prev {
        let mut best = (f32::INFINITY, usize::MAX);
        let mut second = f32::INFINITY;
        for (j, c) in curr.iter().enumerate() {
            let d = dist2(&p.descriptor, &c.descriptor);
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
        }
        if best.0 < r2 * second {
            let c = &curr[best.1];
            out.push(Match {
                prev: (p.x, p.y),
                curr: (c.x, c.y),
            });
        }
    }
    out
}

/// Translation supported by the most matches: every match (or a seeded
/// sample of them) proposes its displacement; the proposal with the most
/// matches within `inlier_tol` wins, ties going to the smaller squared error.
pub fn consensus_translation(matches: &[Match], config: &StabilizerConfig) -> Result<(Translation, usize), DriftFailure> {
    let disp: Vec<Translation> = matches.iter().map(Match::displacement).collect();
    let tol2 = config.inlier_tol_px * config.inlier_tol_px;
    let score = |h: Translation| {
        let mut n = 0usize;
        let mut sse = 0.0;
        for d in &disp {
            let e = (d.dx - h.dx).powi(2) + (d.dy - h.dy).powi(2);
            if e <= tol2 {
                n += 1;
                sse += e;
            }
        }
        (n, sse)
    };
    let hypotheses: Vec<usize> = if disp.len() <= config.consensus_iterations {
        (0..disp.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        (0..config.consensus_iterations).map(|_| rng.random_range(0..disp.len())).collect()
    };
    let mut best: Option<(usize, f64, Translation)> = None;
    for i in hypotheses {
        let (n, sse) = score(disp[i]);
        let better = match best {
            None => true,
            Some((bn, bsse, _)) => n > bn || (n == bn && sse < bsse),
        };
        if better {
            best = Some((n, sse, disp[i]));
        }
    }
    let Some((_, _, h)) = best else {
        return Err(DriftFailure::TooFewMatches(0));
    };
    let mean_of = |h: Translation| {
        let inl: Vec<&Translation> = disp
            .iter()
            .filter(|d| (d.dx - h.dx).powi(2) + (d.dy - h.dy).powi(2) <= tol2)
            .collect();
        let n = inl.len();
        let m = inl.iter().fold(Translation::ZERO, |acc, d| acc + **d).scale(1.0 / n.max(1) as f64);
        (m, n)
    };
    let (m, n) = mean_of(h);
    let (refined, n_refined) = mean_of(m);
    let (t, count) = if n_refined >= n { (refined, n_refined) } else { (m, n) };
    if count < config.min_matches {
        return Err(DriftFailure::NoConsensus(count));
    }
    Ok((t, count))
}

/// Content translation from `prev` to `curr` (curr ~ prev shifted by the result).
pub fn estimate_tile_drift(prev: &Image, curr: &Image, config: &StabilizerConfig) -> Result<Translation, DriftFailure> {
    if prev.dims() != curr.dims() {
        return Err(DriftFailure::SizeMismatch);
    }
    let fp = detect_features(prev, config.max_features);
    let fc = detect_features(curr, config.max_features);
    let matches: Vec<Match> = match_features(&fp, &fc, config.ratio)
        .into_iter()
        .filter(|m| m.displacement().norm() <= config.max_displacement_px)
        .collect();
    if matches.len() < config.min_matches {
        return Err(DriftFailure::TooFewMatches(matches.len()));
    }
    consensus_translation(&matches, config).map(|(t, _)| t)
}
