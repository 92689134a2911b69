//! The time-lapse acquisition engine and its on-disk products.

mod engine;
pub mod layout;
mod log;
mod outputs;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::flatfield::{FlatField, FlatFieldError};
use crate::imaging::{Channel, TiffError};
use crate::microscope::HardwareError;
use crate::planner::{AcquisitionParams, FieldError, OverviewRegion, PlannerError, Roi};
use crate::stabilize::StabilizeError;
use crate::stitch::StitchError;

pub use engine::{
    acquire_overview, create_flattening_on_reference_slide, create_flattening_reference, load_flat_fields, plan_tiles, run_timelapse, AcquisitionRecord,
    OverviewImage,
};
pub use layout::{OutputLayout, PositionsFile, TileKey};
pub use log::{parse_log, sim_timestamp, AcquisitionLog, LogEntry, LogKind};
pub use outputs::{
    stabilize_stitched, write_stitch_outputs, FrameGridSource, StabilizedSequence, TileFileSource,
};

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("acquisition setup is invalid: {}", summarize(.0))]
    Invalid(Vec<FieldError>),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Hardware(#[from] HardwareError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error(transparent)]
    Stabilize(#[from] StabilizeError),
    #[error(transparent)]
    FlatField(#[from] FlatFieldError),
    #[error(transparent)]
    Tiff(#[from] TiffError),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stopped by request")]
    Stopped,
}

fn summarize(errors: &[FieldError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Everything a time-lapse run needs besides the microscope.
#[derive(Debug, Clone)]
pub struct AcquisitionSetup {
    pub params: AcquisitionParams,
    pub overview: OverviewRegion,
    pub rois: Vec<Roi>,
    /// Flat fields by channel, used when `params.apply_flattening` is set.
    pub flat_fields: BTreeMap<Channel, FlatField>,
}

impl AcquisitionSetup {
    pub fn new(params: AcquisitionParams, overview: OverviewRegion, rois: Vec<Roi>) -> Self {
        Self {
            params,
            overview,
            rois,
            flat_fields: BTreeMap::new(),
        }
    }

    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs: Vec<FieldError> = self
            .params
            .field_errors()
            .into_iter()
            .map(|e| FieldError {
                field: format!("params.{}", e.field),
                message: e.message,
            })
            .collect();
        if !self.overview.rect().is_valid() {
            errs.push(FieldError {
                field: "overview".into(),
                message: "upper-left corner must lie above and left of the lower-right corner".into(),
            });
        }
        if self.rois.is_empty() {
            errs.push(FieldError {
                field: "rois".into(),
                message: "at least one ROI is required".into(),
            });
        }
        for (i, roi) in self.rois.iter().enumerate() {
            if let Err(e) = roi.validate_in(&self.overview) {
                errs.push(FieldError {
                    field: format!("rois[{i}]"),
                    message: e.to_string(),
                });
            }
        }
        errs
    }
}

/// Decision returned at each cancellation point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Progress notifications from the engine.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum AcqEvent {
    TileCaptured {
        roi: usize,
        timestep: usize,
        row: usize,
        col: usize,
        z_index: usize,
        channel: Channel,
        path: String,
        tiles_done: usize,
        total: usize,
    },
    TimestepDone {
        timestep: usize,
        aborted: bool,
    },
    AutofocusResult {
        timestep: usize,
        x: f64,
        y: f64,
        z: Option<f64>,
    },
    PlaneRefit {
        timestep: usize,
        a: f64,
        b: f64,
        c: f64,
        n_points: usize,
    },
    PlaneFallback {
        timestep: usize,
        reused_from: Option<usize>,
    },
    PanoramaReady {
        roi: usize,
        timestep: usize,
        channel: Channel,
        path: String,
    },
    StabilizationDone {
        roi: usize,
        frames: usize,
        group: Option<Vec<usize>>,
        fallback: bool,
    },
    Warning {
        message: String,
    },
    Error {
        message: String,
    },
}

/// Receives engine events and decides, between hardware commands, whether
/// the run continues. A paused caller simply blocks inside `checkpoint`.
pub trait AcquisitionObserver {
    fn on_event(&mut self, _sim_time: f64, _event: &AcqEvent) {}

    fn checkpoint(&mut self) -> Control {
        Control::Continue
    }
}

/// Observer that ignores events and never stops.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullObserver;

impl AcquisitionObserver for NullObserver {}

impl<O: AcquisitionObserver + ?Sized> AcquisitionObserver for &mut O {
    fn on_event(&mut self, sim_time: f64, event: &AcqEvent) {
        (**self).on_event(sim_time, event)
    }

    fn checkpoint(&mut self) -> Control {
        (**self).checkpoint()
    }
}
