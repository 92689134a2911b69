//! Tile-based video stabilization.
//!
//! Each tile's drift between consecutive timesteps is estimated from matched
//! blob features. Tiles whose horizontal drift series correlate form a group
//! (found by relaxing a correlation threshold until a connected set of at
//! least three tiles appears); the group's mean drift per timestep is summed
//! into a cumulative correction applied to every stitched frame.

mod drift;
mod features;
mod pipeline;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use drift::{
    average_drift, average_group_drift, build_correlation_matrix, find_correlated_group, threshold_ladder,
    CorrelatedGroup, CorrelationMatrix, FrameDrift, GroupError, TileDriftStore,
};
pub use features::{
    consensus_translation, detect_features, estimate_tile_drift, match_features, DriftFailure, Feature, Match,
    DESCRIPTOR_LEN,
};
pub use pipeline::{
    frame_correction, run_stabilization, run_stabilization_metered, stabilize_frame, stabilize_sequence,
    ResidencyMeter, Resident, StabilizationReport, TileSource,
};

#[derive(Debug, Error)]
pub enum StabilizeError {
    #[error("invalid stabilization input: {0}")]
    Parameter(String),
    #[error("loading tile: {0}")]
    Load(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilizerConfig {
    pub max_features: usize,
    pub ratio: f64,
    pub max_displacement_px: f64,
    pub inlier_tol_px: f64,
    pub min_matches: usize,
    pub consensus_iterations: usize,
    pub seed: u64,
    pub ladder_start: f64,
    pub ladder_step: f64,
    pub ladder_floor: f64,
    /// Estimate drift on flat-field corrected tiles when flattening is on.
    pub use_flattened_tiles: bool,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self {
            max_features: 100,
            ratio: 0.8,
            max_displacement_px: 50.0,
            inlier_tol_px: 2.0,
            min_matches: 5,
            consensus_iterations: 100,
            seed: 0,
            ladder_start: 0.95,
            ladder_step: 0.05,
            ladder_floor: 0.0,
            use_flattened_tiles: true,
        }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_features == 0 {
            return Err("max_features must be at least 1".into());
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err("ratio must lie in (0, 1]".into());
        }
        if !(self.max_displacement_px > 0.0 && self.inlier_tol_px > 0.0) {
            return Err("displacement limit and inlier tolerance must be positive".into());
        }
        if self.min_matches == 0 || self.consensus_iterations == 0 {
            return Err("min_matches and consensus_iterations must be at least 1".into());
        }
        if !(self.ladder_step > 0.0 && self.ladder_floor <= self.ladder_start) {
            return Err("threshold ladder must descend from ladder_start to ladder_floor".into());
        }
        Ok(())
    }
}
