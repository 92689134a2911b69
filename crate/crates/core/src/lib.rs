//! Tiled time-lapse microscopy: a simulated microscope, acquisition planning,
//! flat-field correction, grid stitching and tile-based stabilization.

pub mod acquisition;
pub mod config;
pub mod flatfield;
pub mod imaging;
pub mod microscope;
pub mod planner;
pub mod stabilize;
pub mod stitch;
pub mod workflow;
