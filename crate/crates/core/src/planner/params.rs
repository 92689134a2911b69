use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::imaging::{BitDepth, Channel};
use crate::stabilize::StabilizerConfig;
use crate::stitch::StitchSettings;

use super::PlannerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StitchMode {
    NoOverlap,
    GridBF,
    GridPC,
}

impl StitchMode {
    pub fn registration_channel(self) -> Option<Channel> {
        match self {
            StitchMode::NoOverlap => None,
            StitchMode::GridBF => Some(Channel::BF),
            StitchMode::GridPC => Some(Channel::PC),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TravelMode {
    UserDefined,
    TravelingSalesman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AfUpdate {
    OnlyAtBeginning,
    Every(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Exposure used when a registration channel is added implicitly.
pub const DEFAULT_EXPOSURE_MS: f64 = 33.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionParams {
    /// File-name prefix for tiles and panoramas.
    pub name: String,
    pub duration_h: f64,
    pub interval_min: f64,
    pub z_step_um: f64,
    pub z_min_um: f64,
    pub z_max_um: f64,
    /// Enabled channels with their exposure in milliseconds.
    pub channels: BTreeMap<Channel, f64>,
    pub bit_depth: BitDepth,
    pub stitch_mode: StitchMode,
    pub overlap: f64,
    pub apply_flattening: bool,
    pub execute_stabilization: bool,
    pub af_update_every: AfUpdate,
    pub travel_mode: TravelMode,
    pub stage_speed_um_s: f64,
    pub objective: String,
    pub illumination: f64,
    pub stitching: StitchSettings,
    pub stabilization: StabilizerConfig,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        Self {
            name: "tile".into(),
            duration_h: 1.0,
            interval_min: 10.0,
            z_step_um: 0.0,
            z_min_um: 0.0,
            z_max_um: 0.0,
            channels: BTreeMap::from([(Channel::PC, DEFAULT_EXPOSURE_MS)]),
            bit_depth: BitDepth::Sixteen,
            stitch_mode: StitchMode::GridPC,
            overlap: 0.2,
            apply_flattening: false,
            execute_stabilization: false,
            af_update_every: AfUpdate::Every(5),
            travel_mode: TravelMode::TravelingSalesman,
            stage_speed_um_s: 1000.0,
            objective: "10X".into(),
            illumination: 1.0,
            stitching: StitchSettings::default(),
            stabilization: StabilizerConfig::default(),
        }
    }
}

impl AcquisitionParams {
    /// Add the registration channel a grid stitch mode needs, returning a
    /// warning for each change made.
    pub fn normalize(&mut self) -> Vec<String> {
        let mut warnings = Vec::new();
        if let Some(ch) = self.stitch_mode.registration_channel() {
            if !self.channels.contains_key(&ch) {
                self.channels.insert(ch, DEFAULT_EXPOSURE_MS);
                warnings.push(format!(
                    "stitch mode {:?} registers on {ch}; enabled {ch} at {DEFAULT_EXPOSURE_MS} ms",
                    self.stitch_mode
                ));
            }
        }
        warnings
    }

    /// Check every field invariant, collecting all violations.
    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.contains('_') {
            errs.push(FieldError::new("name", "must be non-empty without '/', '\\' or '_'"));
        }
        if !positive(self.duration_h) {
            errs.push(FieldError::new("duration_h", "must be greater than 0"));
        }
        if !positive(self.interval_min) {
            errs.push(FieldError::new("interval_min", "must be greater than 0"));
        }
        if !(self.z_step_um.is_finite() && self.z_step_um >= 0.0) {
            errs.push(FieldError::new("z_step_um", "must be 0 or positive"));
        }
        if !(self.z_min_um.is_finite() && self.z_max_um.is_finite()) || self.z_min_um > self.z_max_um {
            errs.push(FieldError::new("z_min_um", "must not exceed z_max_um"));
        }
        if self.z_step_um == 0.0 && self.z_min_um != self.z_max_um {
            errs.push(FieldError::new("z_step_um", "a z range needs a positive step"));
        }
        if self.channels.is_empty() {
            errs.push(FieldError::new("channels", "at least one channel must be enabled"));
        }
        for (ch, ms) in &self.channels {
            if !positive(*ms) {
                errs.push(FieldError::new(&format!("channels.{ch}"), "exposure must be greater than 0 ms"));
            }
        }
        if !(self.overlap.is_finite() && (0.0..1.0).contains(&self.overlap)) {
            errs.push(FieldError::new("overlap", "must lie in [0, 1)"));
        } else if self.stitch_mode != StitchMode::NoOverlap && !(self.overlap > 0.0 && self.overlap <= 0.5) {
            errs.push(FieldError::new("overlap", "grid stitching needs an overlap in (0, 0.5]"));
        }
        if let Some(ch) = self.stitch_mode.registration_channel() {
            if !self.channels.contains_key(&ch) {
                errs.push(FieldError::new("stitch_mode", format!("{:?} requires the {ch} channel", self.stitch_mode)));
            }
        }
        if let AfUpdate::Every(0) = self.af_update_every {
            errs.push(FieldError::new("af_update_every", "period must be at least 1"));
        }
        if !positive(self.stage_speed_um_s) {
            errs.push(FieldError::new("stage_speed_um_s", "must be greater than 0"));
        }
        if self.objective.is_empty() {
            errs.push(FieldError::new("objective", "must name an objective"));
        }
        if !(0.0..=1.0).contains(&self.illumination) {
            errs.push(FieldError::new("illumination", "must lie in [0, 1]"));
        }
        if let Err(e) = self.stitching.validate() {
            errs.push(FieldError::new("stitching", e));
        }
        if let Err(e) = self.stabilization.validate() {
            errs.push(FieldError::new("stabilization", e));
        }
        errs
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let errs = self.field_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PlannerError::Validation(errs))
        }
    }

    pub fn z_offsets(&self) -> Vec<f64> {
        super::z_stack(self.z_min_um, self.z_max_um, self.z_step_um)
    }
}
