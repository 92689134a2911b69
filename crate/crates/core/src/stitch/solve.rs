use nalgebra::{DMatrix, DVector};

use super::register::{nominal_step, PairOffset};
use super::StitchSettings;

/// Tile origins (row-major) from pairwise measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPositions {
    /// Origin of each tile in pixels with tile (0, 0) at (0, 0).
    pub positions: Vec<(f64, f64)>,
    /// Tiles not connected to tile (0, 0) that were put on the nominal grid.
    pub orphans: Vec<usize>,
    /// Number of measurements replaced by the nominal step.
    pub low_confidence: usize,
}

pub fn nominal_positions(rows: usize, cols: usize, tile: (usize, usize), overlap: f64) -> Vec<(f64, f64)> {
    let sx = tile.0 as f64 * (1.0 - overlap);
    let sy = tile.1 as f64 * (1.0 - overlap);
    (0..rows * cols).map(|i| ((i % cols) as f64 * sx, (i / cols) as f64 * sy)).collect()
}

/// Weighted least-squares placement over the 4-neighbour constraint graph.
/// Measurements below the confidence threshold fall back to the nominal step
/// with a small weight, so they only decide positions nothing else constrains.
pub fn solve_global_positions(
    offsets: &[PairOffset],
    rows: usize,
    cols: usize,
    tile: (usize, usize),
    overlap: f64,
    settings: &StitchSettings,
) -> GlobalPositions {
    let n = rows * cols;
    let nominal = nominal_positions(rows, cols, tile, overlap);
    let idx = |p: (usize, usize)| p.0 * cols + p.1;

    let mut edges = Vec::with_capacity(offsets.len());
    let mut low_confidence = 0;
    for o in offsets {
        let (i, j) = (idx(o.from), idx(o.to));
        if i >= n || j >= n {
            continue;
        }
        let step = nominal_step(o.relation, tile.0, tile.1, overlap);
        let trusted = o.confidence.is_finite() && o.confidence >= settings.min_confidence && o.offset.is_finite();
        let (m, w) = if trusted {
            ((step.dx + o.offset.dx, step.dy + o.offset.dy), o.confidence)
        } else {
            low_confidence += 1;
            ((step.dx, step.dy), settings.fallback_weight)
        };
        edges.push((i, j, m, w));
    }

    // components reachable from tile 0
    let mut reached = vec![false; n];
    if n > 0 {
        reached[0] = true;
        let mut stack = vec![0];
        while let Some(u) = stack.pop() {
            for &(i, j, _, _) in &edges {
                let v = if i == u {
                    j
                } else if j == u {
                    i
                } else {
                    continue;
                };
                if !reached[v] {
                    reached[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    let members: Vec<usize> = (0..n).filter(|&i| reached[i]).collect();
    let orphans: Vec<usize> = (0..n).filter(|&i| !reached[i]).collect();
    let mut positions = nominal.clone();

    // unknowns are every reached tile except the anchor
    let unknown: Vec<usize> = members.iter().copied().filter(|&i| i != 0).collect();
    if !unknown.is_empty() {
        let mut slot = vec![usize::MAX; n];
        for (k, &i) in unknown.iter().enumerate() {
            slot[i] = k;
        }
        let m = unknown.len();
        let mut lap = DMatrix::<f64>::zeros(m, m);
        let mut bx = DVector::<f64>::zeros(m);
        let mut by = DVector::<f64>::zeros(m);
        for &(i, j, (mx, my), w) in &edges {
            if !reached[i] {
                continue;
            }
            // residual p_j - p_i - m
            let (si, sj) = (slot[i], slot[j]);
            if sj != usize::MAX {
                lap[(sj, sj)] += w;
                bx[sj] += w * mx;
                by[sj] += w * my;
            }
            if si != usize::MAX {
                lap[(si, si)] += w;
                bx[si] -= w * mx;
                by[si] -= w * my;
            }
            if si != usize::MAX && sj != usize::MAX {
                lap[(si, sj)] -= w;
                lap[(sj, si)] -= w;
            }
        }
        if let Some(chol) = lap.cholesky() {
            let px = chol.solve(&bx);
            let py = chol.solve(&by);
            for (k, &i) in unknown.iter().enumerate() {
                positions[i] = (px[k], py[k]);
            }
        }
    }
    positions[0] = (0.0, 0.0);
    GlobalPositions {
        positions,
        orphans,
        low_confidence,
    }
}
