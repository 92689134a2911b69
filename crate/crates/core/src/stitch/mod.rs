//! Grid stitching: side-by-side placement, or pairwise NCC registration on
//! one channel followed by a global solve whose positions every channel uses.

mod blend;
mod register;
mod seam;
mod solve;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{Channel, Image};
use crate::planner::StitchMode;

pub use blend::{blend, place_no_overlap};
pub use register::{nominal_step, register_pair, PairOffset, Relation};
pub use seam::seam_metric;
pub use solve::{nominal_positions, solve_global_positions, GlobalPositions};

/// (row, col) within an ROI grid.
pub type GridPos = (usize, usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StitchError {
    #[error("invalid stitching input: {0}")]
    Parameter(String),
    #[error("registration channel {0} has no tiles")]
    MissingRegistrationChannel(Channel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchSettings {
    pub max_search_px: usize,
    pub min_confidence: f64,
    /// Weight given to a low-confidence pair once replaced by the nominal step.
    pub fallback_weight: f64,
}

impl Default for StitchSettings {
    fn default() -> Self {
        Self {
            max_search_px: 30,
            min_confidence: 0.3,
            fallback_weight: 1e-3,
        }
    }
}

impl StitchSettings {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_search_px == 0 {
            return Err("max_search_px must be at least 1".into());
        }
        if !(-1.0..=1.0).contains(&self.min_confidence) {
            return Err("min_confidence must lie in [-1, 1]".into());
        }
        if !(self.fallback_weight.is_finite() && self.fallback_weight > 0.0) {
            return Err("fallback_weight must be positive".into());
        }
        Ok(())
    }
}

/// A stitched frame. `tile_positions` are tile origins in panorama pixels,
/// row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    pub image: Image,
    pub tile_positions: Vec<(f64, f64)>,
    pub roi_id: usize,
    pub timestep: usize,
    pub channel: Channel,
}

impl Panorama {
    pub fn new(image: Image, tile_positions: Vec<(f64, f64)>) -> Self {
        let channel = image.channel();
        Self {
            image,
            tile_positions,
            roi_id: 0,
            timestep: 0,
            channel,
        }
    }

    /// Origin of tile (0, 0) in panorama pixels.
    pub fn anchor(&self) -> (f64, f64) {
        self.tile_positions.first().copied().unwrap_or((0.0, 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct StitchOutput {
    pub panoramas: BTreeMap<Channel, Panorama>,
    pub offsets: Vec<PairOffset>,
    /// Tile origins relative to tile (0, 0), shared by every channel.
    pub positions: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

fn neighbour_pairs(rows: usize, cols: usize) -> Vec<(GridPos, GridPos, Relation)> {
    let mut pairs = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                pairs.push(((r, c), (r, c + 1), Relation::RightOf));
            }
            if r + 1 < rows {
                pairs.push(((r, c), (r + 1, c), Relation::Below));
            }
        }
    }
    pairs
}

/// Stitch every channel of one ROI timestep. `tiles[ch]` is row-major with
/// `None` for tiles that were not acquired.
pub fn stitch(
    tiles: &BTreeMap<Channel, Vec<Option<Image>>>,
    rows: usize,
    cols: usize,
    mode: StitchMode,
    overlap: f64,
    settings: &StitchSettings,
) -> Result<StitchOutput, StitchError> {
    let mut warnings = Vec::new();
    let mut panoramas = BTreeMap::new();
    let refs = |ch: &Channel| -> Vec<Option<&Image>> { tiles[ch].iter().map(Option::as_ref).collect() };
    for (ch, list) in tiles {
        if list.len() != rows * cols {
            return Err(StitchError::Parameter(format!(
                "{ch}: {} tiles supplied for a {rows}x{cols} grid",
                list.len()
            )));
        }
    }

    let Some(reg) = mode.registration_channel() else {
        let mut positions = Vec::new();
        for ch in tiles.keys() {
            let (pano, missing) = place_no_overlap(&refs(ch), rows, cols)?;
            for i in missing {
                warnings.push(format!("{ch}: tile r{} c{} missing, left black", i / cols, i % cols));
            }
            positions = pano.tile_positions.clone();
            panoramas.insert(*ch, pano);
        }
        return Ok(StitchOutput {
            panoramas,
            offsets: Vec::new(),
            positions,
            warnings,
        });
    };

    let reg_tiles = tiles.get(&reg).ok_or(StitchError::MissingRegistrationChannel(reg))?;
    let tile_dims = reg_tiles
        .iter()
        .flatten()
        .next()
        .map(Image::dims)
        .ok_or(StitchError::MissingRegistrationChannel(reg))?;
    let pairs = neighbour_pairs(rows, cols);
    let measured: Vec<Result<Option<PairOffset>, StitchError>> = pairs
        .par_iter()
        .map(|&(from, to, rel)| {
            let a = reg_tiles[from.0 * cols + from.1].as_ref();
            let b = reg_tiles[to.0 * cols + to.1].as_ref();
            match (a, b) {
                (Some(a), Some(b)) => {
                    let mut p = register_pair(a, b, rel, overlap, settings.max_search_px)?;
                    p.from = from;
                    p.to = to;
                    Ok(Some(p))
                }
                _ => Ok(None),
            }
        })
        .collect();
    let mut offsets = Vec::new();
    for m in measured {
        if let Some(p) = m? {
            offsets.push(p);
        }
    }
    let global = solve_global_positions(&offsets, rows, cols, tile_dims, overlap, settings);
    if global.low_confidence > 0 {
        warnings.push(format!(
            "{} of {} pair registrations below confidence {}; nominal spacing used",
            global.low_confidence,
            offsets.len(),
            settings.min_confidence
        ));
    }
    for &i in &global.orphans {
        warnings.push(format!("tile r{} c{} unconnected, placed on the nominal grid", i / cols, i % cols));
    }
    for ch in tiles.keys() {
        panoramas.insert(*ch, blend(&refs(ch), &global.positions)?);
    }
    Ok(StitchOutput {
        panoramas,
        offsets,
        positions: global.positions,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{BitDepth, FloatImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(w: usize, h: usize) -> FloatImage {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = FloatImage::from_fn(w, h, |_, _| rng.random_range(0.0..250.0));
        crate::imaging::gaussian_blur(&raw, 1.2)
    }

    fn cut(src: &FloatImage, x0: usize, y0: usize, w: usize, h: usize, ch: Channel) -> Image {
        Image::from_fn(w, h, BitDepth::Sixteen, 1.0, ch, |x, y| src.get(x0 + x, y0 + y) as f64 * 40.0)
    }

    #[test]
    fn cut_and_reassemble_without_overlap_is_exact() {
        let src = oracle(60, 40);
        let whole = cut(&src, 0, 0, 60, 40, Channel::PC);
        let tiles: Vec<Option<Image>> = (0..6)
            .map(|i| Some(cut(&src, (i % 3) * 20, (i / 3) * 20, 20, 20, Channel::PC)))
            .collect();
        let map = BTreeMap::from([(Channel::PC, tiles)]);
        let out = stitch(&map, 2, 3, StitchMode::NoOverlap, 0.0, &StitchSettings::default()).unwrap();
        assert_eq!(out.panoramas[&Channel::PC].image, whole);
    }

    #[test]
    fn grid_positions_transfer_to_other_channels() {
        let src = oracle(200, 200);
        let step = 48;
        let mut pc = Vec::new();
        let mut fl = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                pc.push(Some(cut(&src, 10 + c * step, 10 + r * step, 60, 60, Channel::PC)));
                fl.push(Some(cut(&src, 10 + c * step, 10 + r * step, 60, 60, Channel::FL)));
            }
        }
        let map = BTreeMap::from([(Channel::PC, pc), (Channel::FL, fl)]);
        let settings = StitchSettings {
            max_search_px: 8,
            ..StitchSettings::default()
        };
        let out = stitch(&map, 2, 2, StitchMode::GridPC, 0.2, &settings).unwrap();
        let pc = &out.panoramas[&Channel::PC];
        let fl = &out.panoramas[&Channel::FL];
        assert_eq!(pc.tile_positions, fl.tile_positions);
        let (w, h) = pc.image.dims();
        assert!(w.abs_diff(108) <= 1 && h.abs_diff(108) <= 1, "{w}x{h}");
        for (p, n) in out.positions.iter().zip([(0.0, 0.0), (48.0, 0.0), (0.0, 48.0), (48.0, 48.0)]) {
            assert!((p.0 - n.0).abs() < 0.1 && (p.1 - n.1).abs() < 0.1, "{p:?}");
        }
        assert!(out.warnings.is_empty(), "{:?}", out.warnings);
        assert!(stitch(&map, 2, 2, StitchMode::GridBF, 0.2, &settings).is_err());
    }
}
