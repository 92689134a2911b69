//! JSON system configuration shared by the command-line tool and the server.
//!
//! ```json
//! {
//!   "data_root": "data",
//!   "simulator": { "seed": 7, "camera": { "width": 128, "height": 128 } },
//!   "params": { "name": "scan", "duration_h": 1, "interval_min": 10 },
//!   "overview": { "upper_left": { "x": 100, "y": 100 }, "lower_right": { "x": 600, "y": 600 } },
//!   "rois": [ { "x_min": 150, "y_min": 150, "x_max": 300, "y_max": 300 } ]
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::AcquisitionSetup;
use crate::imaging::Channel;
use crate::microscope::{validate_turret, SimulatorConfig};
use crate::planner::{AcquisitionParams, FieldError, OverviewRegion, Roi, StageRect};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Reference-sample flattening run before the time-lapse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlatteningConfig {
    /// Image a uniform reference specimen at the planned tile positions and
    /// build flat fields before acquiring.
    pub create: bool,
    /// Intensity of the uniform reference specimen.
    pub reference_level: f64,
}

impl Default for FlatteningConfig {
    fn default() -> Self {
        Self {
            create: false,
            reference_level: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub port: u16,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
    /// Capacity of the event buffer before the oldest events are dropped.
    pub event_buffer: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            cors_origin: None,
            event_buffer: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub data_root: PathBuf,
    pub simulator: SimulatorConfig,
    pub params: AcquisitionParams,
    pub overview: Option<OverviewRegion>,
    /// Objective used for the overview; the lowest turret position when unset.
    pub overview_objective: Option<String>,
    pub overview_channel: Channel,
    pub overview_exposure_ms: f64,
    /// ROIs in stage micrometres, in visiting order.
    pub rois: Vec<StageRect>,
    pub flattening: FlatteningConfig,
    pub server: ServerConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            simulator: SimulatorConfig::default(),
            params: AcquisitionParams::default(),
            overview: None,
            overview_objective: None,
            overview_channel: Channel::PC,
            overview_exposure_ms: 33.0,
            rois: Vec::new(),
            flattening: FlatteningConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

fn field(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

impl SystemConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn roi_list(&self) -> Vec<Roi> {
        self.rois.iter().enumerate().map(|(id, &rect)| Roi { id, rect }).collect()
    }

    pub fn overview_objective_label(&self) -> Option<String> {
        self.overview_objective.clone().or_else(|| {
            self.simulator
                .objectives
                .iter()
                .min_by_key(|o| o.turret_position)
                .map(|o| o.label.clone())
        })
    }

    /// Every problem that would stop a scripted acquisition, by field.
    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if let Err(e) = validate_turret(&self.simulator.objectives) {
            errs.push(field("simulator.objectives", e.to_string()));
        }
        if !self.simulator.objectives.iter().any(|o| o.label == self.params.objective) {
            errs.push(field("params.objective", format!("no objective labelled {:?}", self.params.objective)));
        }
        if let Some(label) = &self.overview_objective {
            if !self.simulator.objectives.iter().any(|o| &o.label == label) {
                errs.push(field("overview_objective", format!("no objective labelled {label:?}")));
            }
        }
        if !(self.overview_exposure_ms.is_finite() && self.overview_exposure_ms > 0.0) {
            errs.push(field("overview_exposure_ms", "must be greater than 0"));
        }
        match &self.overview {
            None => errs.push(field("overview", "upper-left and lower-right corners are required")),
            Some(ov) => {
                let setup = AcquisitionSetup::new(self.params.clone(), *ov, self.roi_list());
                errs.extend(setup.field_errors());
            }
        }
        if self.overview.is_none() {
            let mut params = self.params.field_errors();
            for e in &mut params {
                e.field = format!("params.{}", e.field);
            }
            errs.extend(params);
            if self.rois.is_empty() {
                errs.push(field("rois", "at least one ROI is required"));
            }
        }
        errs
    }

    /// The acquisition setup, once `field_errors` is empty.
    pub fn setup(&self) -> Result<AcquisitionSetup, Vec<FieldError>> {
        let errs = self.field_errors();
        if !errs.is_empty() {
            return Err(errs);
        }
        let overview = self.overview.expect("validated");
        Ok(AcquisitionSetup::new(self.params.clone(), overview, self.roi_list()))
    }
}
