use std::borrow::Borrow;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::drift::{
    average_drift, average_group_drift, build_correlation_matrix, find_correlated_group, CorrelatedGroup,
    CorrelationMatrix, FrameDrift, TileDriftStore,
};
use super::features::estimate_tile_drift;
use super::{StabilizeError, StabilizerConfig};
use crate::imaging::{warp_translate, warp_translate_resized, Image, Translation};

/// Counts tile images currently alive and remembers the peak.
#[derive(Debug, Default, Clone)]
pub struct ResidencyMeter {
    inner: Arc<(AtomicUsize, AtomicUsize)>,
}

impl ResidencyMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> usize {
        self.inner.0.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.1.load(Ordering::SeqCst)
    }

    /// Wrap a freshly loaded tile so its lifetime is counted.
    pub fn track<T>(&self, tile: T) -> Resident<T> {
        let now = self.inner.0.fetch_add(1, Ordering::SeqCst) + 1;
        self.inner.1.fetch_max(now, Ordering::SeqCst);
        Resident {
            tile,
            meter: self.clone(),
        }
    }
}

pub struct Resident<T> {
    tile: T,
    meter: ResidencyMeter,
}

impl<T> Resident<T> {
    pub fn get(&self) -> &T {
        &self.tile
    }
}

impl<T> Drop for Resident<T> {
    fn drop(&mut self) {
        self.meter.inner.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Random access to the tiles of a time-lapse, loaded on demand.
pub trait TileSource: Sync {
    type Tile: Borrow<Image> + Send + Sync;

    fn n_timesteps(&self) -> usize;
    fn n_tiles(&self) -> usize;
    fn load(&self, t: usize, tile: usize) -> Result<Self::Tile, StabilizeError>;
}

/// In-memory tiles, `tiles[t][k]`.
impl TileSource for Vec<Vec<Image>> {
    type Tile = Image;

    fn n_timesteps(&self) -> usize {
        self.len()
    }

    fn n_tiles(&self) -> usize {
        self.first().map_or(0, Vec::len)
    }

    fn load(&self, t: usize, tile: usize) -> Result<Image, StabilizeError> {
        self.get(t)
            .and_then(|row| row.get(tile))
            .cloned()
            .ok_or_else(|| StabilizeError::Parameter(format!("no tile {tile} at timestep {t}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilizationReport {
    pub store: TileDriftStore,
    pub correlation: CorrelationMatrix,
    pub group: Option<CorrelatedGroup>,
    /// True when no correlated group was found and all tiles were averaged.
    pub fallback: bool,
    pub drift: FrameDrift,
    pub cumulative: Vec<Translation>,
    pub peak_residency: usize,
    pub warnings: Vec<String>,
}

/// Estimate per-tile drift between consecutive timesteps (holding at most
/// two timesteps of tiles), then group, average and accumulate.
pub fn run_stabilization<S: TileSource>(source: &S, config: &StabilizerConfig) -> Result<StabilizationReport, StabilizeError> {
    let meter = ResidencyMeter::new();
    run_stabilization_metered(source, config, &meter)
}

pub fn run_stabilization_metered<S: TileSource>(
    source: &S,
    config: &StabilizerConfig,
    meter: &ResidencyMeter,
) -> Result<StabilizationReport, StabilizeError> {
    let steps = source.n_timesteps();
    let n = source.n_tiles();
    if steps < 2 {
        return Err(StabilizeError::Parameter(format!("need at least 2 timesteps, have {steps}")));
    }
    if n == 0 {
        return Err(StabilizeError::Parameter("no tiles per timestep".into()));
    }
    let load_step = |t: usize| -> Result<Vec<Resident<S::Tile>>, StabilizeError> {
        (0..n).map(|k| source.load(t, k).map(|tile| meter.track(tile))).collect()
    };
    let mut store = TileDriftStore::new(n, steps);
    let mut warnings = Vec::new();
    let mut prev = load_step(0)?;
    for t in 1..steps {
        let curr = load_step(t)?;
        let estimates: Vec<_> = (0..n)
            .into_par_iter()
            .map(|k| estimate_tile_drift(prev[k].get().borrow(), curr[k].get().borrow(), config))
            .collect();
        for (k, e) in estimates.into_iter().enumerate() {
            match e {
                Ok(v) => store.set(t, k, Some(v)),
                Err(err) => {
                    tracing::debug!(t, tile = k, %err, "tile drift estimation failed");
                    store.set(t, k, None);
                }
            }
        }
        prev = curr;
    }
    drop(prev);

    let correlation = build_correlation_matrix(&store);
    let (group, fallback, drift) = match find_correlated_group(&correlation, config) {
        Ok(g) => {
            let d = average_group_drift(&store, &g);
            (Some(g), false, d)
        }
        Err(e) => {
            warnings.push(format!("{e}; averaging every valid tile"));
            let all: Vec<usize> = (0..n).collect();
            (None, true, average_drift(&store, &all))
        }
    };
    for &t in &drift.empty_steps {
        warnings.push(format!("timestep {t}: no valid drift estimate, correction held"));
    }
    let cumulative = drift.cumulative();
    Ok(StabilizationReport {
        store,
        correlation,
        group,
        fallback,
        drift,
        cumulative,
        peak_residency: meter.peak(),
        warnings,
    })
}

/// Apply the cumulative correction: frame t is shifted by -S[t].
pub fn stabilize_sequence(frames: &[Image], drift: &FrameDrift) -> Result<Vec<Image>, StabilizeError> {
    if frames.len() != drift.d.len() {
        return Err(StabilizeError::Parameter(format!(
            "{} frames but drift for {} timesteps",
            frames.len(),
            drift.d.len()
        )));
    }
    let s = drift.cumulative();
    Ok(frames
        .par_iter()
        .zip(s.par_iter())
        .map(|(f, s)| warp_translate(f, -*s))
        .collect())
}

/// Correction for stitched frame t whose tile (0, 0) origin is `anchor_t`:
/// align its anchor with frame 0's, then undo the accumulated drift.
pub fn frame_correction(anchor_0: (f64, f64), anchor_t: (f64, f64), cumulative: Translation) -> Translation {
    Translation::new(anchor_0.0 - anchor_t.0, anchor_0.1 - anchor_t.1) - cumulative
}

/// Stabilize one stitched frame onto frame 0's canvas.
pub fn stabilize_frame(frame: &Image, correction: Translation, canvas: (usize, usize)) -> Image {
    warp_translate_resized(frame, correction, canvas.0, canvas.1)
}
