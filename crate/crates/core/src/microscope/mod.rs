//! Hardware command surface and its ground-truth simulator.
//!
//! [`Microscope`] is the set of commands the acquisition engine drives: stage,
//! focus drive, nosepiece, filter turret, camera, epifluorescence shutter and
//! hardware autofocus. [`VirtualMicroscope`] implements it against a synthetic
//! specimen whose drift trajectory is recorded so tests can query the truth.

mod scene;
mod virtual_scope;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{BitDepth, Channel, Image};
use crate::planner::StagePoint;

pub use scene::{DriftConfig, Fiducial, MovingRegion, SceneConfig, ScenePattern, SpecimenScene, Trajectory};
pub use virtual_scope::{
    CameraConfig, FocalPlaneTruth, HwEvent, HwEventKind, Latencies, SimulatorConfig, VirtualMicroscope,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HardwareError {
    #[error("stage target ({x:.1}, {y:.1}) um is outside the travel range")]
    TravelLimit { x: f64, y: f64 },
    #[error("invalid hardware parameter: {0}")]
    Parameter(String),
    #[error("objective at position {position} ({label}) cannot run hardware autofocus")]
    Capability { position: usize, label: String },
    #[error("field of view at ({x:.1}, {y:.1}) um leaves the specimen")]
    SceneBounds { x: f64, y: f64 },
    #[error("no exposure set for channel {0}")]
    ExposureUnset(Channel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub label: String,
    pub magnification: f64,
    /// Micrometres per camera pixel.
    pub pixel_ratio: f64,
    #[serde(default)]
    pub autofocus_capable: bool,
    pub turret_position: usize,
}

/// Check the turret invariants: positive ratios, one objective per position,
/// and an autofocus-capable objective in the last position.
pub fn validate_turret(objectives: &[ObjectiveSpec]) -> Result<(), HardwareError> {
    if objectives.is_empty() {
        return Err(HardwareError::Parameter("no objectives configured".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for o in objectives {
        if !(o.pixel_ratio.is_finite() && o.pixel_ratio > 0.0) {
            return Err(HardwareError::Parameter(format!("objective {} has non-positive pixel ratio", o.label)));
        }
        if !seen.insert(o.turret_position) {
            return Err(HardwareError::Parameter(format!(
                "turret position {} is occupied twice",
                o.turret_position
            )));
        }
    }
    let last = objectives.iter().max_by_key(|o| o.turret_position).expect("non-empty");
    if !last.autofocus_capable {
        return Err(HardwareError::Parameter(format!(
            "last turret position ({}) must hold an autofocus-capable objective",
            last.label
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutofocusOutcome {
    /// In-focus drive position in micrometres.
    Measured(f64),
    Failed,
}

/// Immutable snapshot of the hardware state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicroscopeState {
    pub stage_xy: StagePoint,
    pub stage_speed: f64,
    pub objective: usize,
    pub z: f64,
    pub channel: Channel,
    pub exposure_ms: BTreeMap<Channel, f64>,
    pub fl_shutter_open: bool,
    pub illumination: f64,
    pub bit_depth: BitDepth,
    pub sim_clock: f64,
}

/// Commands the acquisition engine issues. All methods that change hardware
/// state take `&mut self`; the owner serializes access.
pub trait Microscope {
    fn state(&self) -> MicroscopeState;
    fn objectives(&self) -> Vec<ObjectiveSpec>;
    fn sensor_size(&self) -> (usize, usize);

    /// Move the stage; returns the travel time in seconds.
    fn set_stage_xy(&mut self, target: StagePoint) -> Result<f64, HardwareError>;
    fn set_stage_speed(&mut self, um_per_s: f64) -> Result<(), HardwareError>;
    fn set_z(&mut self, z_um: f64) -> Result<(), HardwareError>;
    fn set_objective(&mut self, turret_position: usize) -> Result<(), HardwareError>;
    fn set_channel(&mut self, channel: Channel) -> Result<(), HardwareError>;
    fn set_exposure(&mut self, channel: Channel, ms: f64) -> Result<(), HardwareError>;
    fn set_fl_shutter(&mut self, open: bool) -> Result<(), HardwareError>;
    fn set_illumination(&mut self, fraction: f64) -> Result<(), HardwareError>;
    fn set_bit_depth(&mut self, depth: BitDepth) -> Result<(), HardwareError>;

    fn snap_image(&mut self) -> Result<Image, HardwareError>;
    fn autofocus(&mut self) -> Result<AutofocusOutcome, HardwareError>;

    /// Idle until the simulated clock reaches `t_s` (no-op if already past).
    fn wait_until(&mut self, t_s: f64);

    fn objective_by_label(&self, label: &str) -> Option<ObjectiveSpec> {
        self.objectives().into_iter().find(|o| o.label == label)
    }

    /// The objective in the last nosepiece position, assumed autofocus-capable.
    fn autofocus_objective(&self) -> Option<ObjectiveSpec> {
        self.objectives().into_iter().max_by_key(|o| o.turret_position)
    }

    fn current_objective(&self) -> Option<ObjectiveSpec> {
        let pos = self.state().objective;
        self.objectives().into_iter().find(|o| o.turret_position == pos)
    }
}

impl<M: Microscope + ?Sized> Microscope for &mut M {
    fn state(&self) -> MicroscopeState {
        (**self).state()
    }
    fn objectives(&self) -> Vec<ObjectiveSpec> {
        (**self).objectives()
    }
    fn sensor_size(&self) -> (usize, usize) {
        (**self).sensor_size()
    }
    fn set_stage_xy(&mut self, target: StagePoint) -> Result<f64, HardwareError> {
        (**self).set_stage_xy(target)
    }
    fn set_stage_speed(&mut self, um_per_s: f64) -> Result<(), HardwareError> {
        (**self).set_stage_speed(um_per_s)
    }
    fn set_z(&mut self, z_um: f64) -> Result<(), HardwareError> {
        (**self).set_z(z_um)
    }
    fn set_objective(&mut self, turret_position: usize) -> Result<(), HardwareError> {
        (**self).set_objective(turret_position)
    }
    fn set_channel(&mut self, channel: Channel) -> Result<(), HardwareError> {
        (**self).set_channel(channel)
    }
    fn set_exposure(&mut self, channel: Channel, ms: f64) -> Result<(), HardwareError> {
        (**self).set_exposure(channel, ms)
    }
    fn set_fl_shutter(&mut self, open: bool) -> Result<(), HardwareError> {
        (**self).set_fl_shutter(open)
    }
    fn set_illumination(&mut self, fraction: f64) -> Result<(), HardwareError> {
        (**self).set_illumination(fraction)
    }
    fn set_bit_depth(&mut self, depth: BitDepth) -> Result<(), HardwareError> {
        (**self).set_bit_depth(depth)
    }
    fn snap_image(&mut self) -> Result<Image, HardwareError> {
        (**self).snap_image()
    }
    fn autofocus(&mut self) -> Result<AutofocusOutcome, HardwareError> {
        (**self).autofocus()
    }
    fn wait_until(&mut self, t_s: f64) {
        (**self).wait_until(t_s)
    }
}
