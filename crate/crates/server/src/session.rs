//! The acquisition lifecycle as a phase machine.
//!
//! Every mutation goes through [`Session::commit`], which appends exactly one
//! event: `PhaseChanged` when the phase moved, `ConfigChanged` otherwise.
//! Engine notifications during a run are appended under their own kinds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};
use tilescope::acquisition::{AcqEvent, OverviewImage};
use tilescope::flatfield::FlatField;
use tilescope::imaging::Channel;
use tilescope::planner::{AcquisitionParams, OverviewRegion, StagePoint, StageRect};

use crate::events::EventLog;
use crate::render::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Idle,
    OverviewSetup,
    OverviewAcquiring,
    RoiSelection,
    FocusSetup,
    Running,
    Paused,
    Done,
    Error,
}

impl Phase {
    /// Phases in which the hardware belongs to a background task.
    pub fn is_busy(self) -> bool {
        matches!(self, Phase::OverviewAcquiring | Phase::Running | Phase::Paused)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Rectangle on the overview panorama, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct PixelRect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoiEntry {
    pub id: usize,
    pub stage: StageRect,
    pub pixel: PixelRect,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Progress {
    pub timestep: Option<usize>,
    pub tiles_done: usize,
    pub total: usize,
    pub completed: Vec<usize>,
    pub aborted: Vec<usize>,
    pub stopped: bool,
}

/// Geometry of the acquired overview, without its pixels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverviewInfo {
    pub width: usize,
    pub height: usize,
    pub origin: StagePoint,
    pub um_per_px: f64,
    pub channel: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastEntry {
    pub roi: Option<usize>,
    pub channel: Channel,
    pub lo: u16,
    pub hi: u16,
}

/// Key of a stitched frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FrameKey {
    pub roi: usize,
    pub timestep: usize,
    pub channel: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub dir: PathBuf,
    pub name: String,
    /// The channel whose stabilized frames carry no channel tag.
    pub primary_channel: Channel,
}

/// The `/state` body.
#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub phase: Phase,
    pub params: AcquisitionParams,
    pub upper_left: Option<StagePoint>,
    pub lower_right: Option<StagePoint>,
    pub overview: Option<OverviewRegion>,
    pub overview_image: Option<OverviewInfo>,
    pub rois: Vec<RoiEntry>,
    pub z_min: Option<f64>,
    pub z_max: Option<f64>,
    pub contrast: Vec<ContrastEntry>,
    pub flat_field_channels: Vec<Channel>,
    pub progress: Progress,
    pub last_error: Option<String>,
    pub run: Option<RunInfo>,
    pub stage: StagePoint,
    pub z: f64,
    pub sim_time: f64,
    /// Sequence number of the last event the snapshot reflects.
    pub last_seq: u64,
}

#[derive(Debug)]
pub struct Session {
    pub phase: Phase,
    pub params: AcquisitionParams,
    pub upper_left: Option<StagePoint>,
    pub lower_right: Option<StagePoint>,
    pub overview: Option<OverviewRegion>,
    pub overview_image: Option<(OverviewImage, Channel)>,
    pub rois: Vec<RoiEntry>,
    pub z_min: Option<f64>,
    pub z_max: Option<f64>,
    pub contrast: BTreeMap<(Option<usize>, Channel), Window>,
    pub flat_fields: BTreeMap<Channel, FlatField>,
    pub progress: Progress,
    pub last_error: Option<String>,
    pub run: Option<RunInfo>,
    pub frames: BTreeMap<FrameKey, PathBuf>,
    /// ROIs whose stabilized frames are on disk.
    pub stabilized: Vec<usize>,
    pub events: EventLog,
    pub sim_time: f64,
}

impl Session {
    pub fn new(params: AcquisitionParams, event_buffer: usize) -> Self {
        Self {
            phase: Phase::Idle,
            params,
            upper_left: None,
            lower_right: None,
            overview: None,
            overview_image: None,
            rois: Vec::new(),
            z_min: None,
            z_max: None,
            contrast: BTreeMap::new(),
            flat_fields: BTreeMap::new(),
            progress: Progress::default(),
            last_error: None,
            run: None,
            frames: BTreeMap::new(),
            stabilized: Vec::new(),
            events: EventLog::new(event_buffer),
            sim_time: 0.0,
        }
    }

    /// Record the mutation just applied. `before` is the phase prior to it.
    pub fn commit(&mut self, before: Phase, action: &str, detail: Value) -> u64 {
        let mut payload = json!({ "action": action });
        if let (Value::Object(dst), Value::Object(src)) = (&mut payload, detail) {
            dst.extend(src);
        }
        let kind = if before != self.phase {
            payload["from"] = json!(before);
            payload["to"] = json!(self.phase);
            "PhaseChanged"
        } else {
            "ConfigChanged"
        };
        self.events.push(self.sim_time, kind, payload)
    }

    /// Change phase and record it as one event.
    pub fn transition(&mut self, to: Phase, action: &str, detail: Value) -> u64 {
        let before = self.phase;
        self.phase = to;
        self.commit(before, action, detail)
    }

    /// Drop everything derived from the overview region.
    pub fn clear_overview_products(&mut self) {
        self.overview_image = None;
        self.rois.clear();
        self.z_min = None;
        self.z_max = None;
    }

    pub fn snapshot(&self, stage: StagePoint, z: f64) -> Snapshot {
        Snapshot {
            phase: self.phase,
            params: self.params.clone(),
            upper_left: self.upper_left,
            lower_right: self.lower_right,
            overview: self.overview,
            overview_image: self.overview_image.as_ref().map(|(ov, ch)| OverviewInfo {
                width: ov.panorama.image.width(),
                height: ov.panorama.image.height(),
                origin: ov.origin,
                um_per_px: ov.um_per_px,
                channel: *ch,
            }),
            rois: self.rois.clone(),
            z_min: self.z_min,
            z_max: self.z_max,
            contrast: self
                .contrast
                .iter()
                .map(|(&(roi, channel), w)| ContrastEntry {
                    roi,
                    channel,
                    lo: w.lo,
                    hi: w.hi,
                })
                .collect(),
            flat_field_channels: self.flat_fields.keys().copied().collect(),
            progress: self.progress.clone(),
            last_error: self.last_error.clone(),
            run: self.run.clone(),
            stage,
            z,
            sim_time: self.sim_time,
            last_seq: self.events.last_seq(),
        }
    }

    /// Contrast for a frame: the ROI's own window, else the channel-wide one.
    pub fn window_for(&self, roi: Option<usize>, channel: Channel) -> Option<Window> {
        roi.and_then(|r| self.contrast.get(&(Some(r), channel)))
            .or_else(|| self.contrast.get(&(None, channel)))
            .copied()
    }

    /// Fold an engine notification into progress and append it to the log.
    pub fn record_engine_event(&mut self, sim_time: f64, event: &AcqEvent) {
        self.sim_time = sim_time;
        let mut payload = serde_json::to_value(event).unwrap_or(Value::Null);
        let kind = payload
            .as_object_mut()
            .and_then(|m| m.remove("kind"))
            .and_then(|k| k.as_str().map(str::to_string))
            .unwrap_or_else(|| "Unknown".into());
        match event {
            AcqEvent::TileCaptured {
                timestep,
                tiles_done,
                total,
                ..
            } => {
                self.progress.timestep = Some(*timestep);
                self.progress.tiles_done = *tiles_done;
                self.progress.total = *total;
            }
            AcqEvent::TimestepDone { timestep, aborted } => {
                if *aborted {
                    self.progress.aborted.push(*timestep);
                } else {
                    self.progress.completed.push(*timestep);
                }
            }
            AcqEvent::PanoramaReady {
                roi,
                timestep,
                channel,
                path,
            } => {
                let key = FrameKey {
                    roi: *roi,
                    timestep: *timestep,
                    channel: *channel,
                };
                self.frames.insert(key, PathBuf::from(path));
                payload["url"] = json!(format!("/frames/{roi}/{timestep}/{channel}"));
            }
            AcqEvent::StabilizationDone { roi, .. } => {
                if !self.stabilized.contains(roi) {
                    self.stabilized.push(*roi);
                }
            }
            _ => {}
        }
        self.events.push(sim_time, kind, payload);
    }
}
