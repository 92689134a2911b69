//! Acquisition planning: parameters, overview geometry, tile grids, stage
//! routes, focus planes and the time-lapse schedule.

mod focus;
mod grid;
mod params;
mod route;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use focus::{fit_focus_plane, interpolate_z, FocusPlane, FocusPoint};
pub use grid::{compute_tile_grid, tile_count, z_stack, TilePlan};
pub use params::{AcquisitionParams, AfUpdate, FieldError, StitchMode, TravelMode};
pub use route::{path_length, plan_route, plan_route_from};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("invalid planning parameter: {0}")]
    Parameter(String),
    #[error("focus plane fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("acquisition parameters failed validation: {}", summarize(.0))]
    Validation(Vec<FieldError>),
}

fn summarize(errors: &[FieldError]) -> String {
    errors.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; ")
}

/// Stage position in micrometres; y grows downward, as on the overview image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StagePoint {
    pub x: f64,
    pub y: f64,
}

impl StagePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: StagePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned rectangle in stage micrometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl StageRect {
    pub fn from_corners(upper_left: StagePoint, lower_right: StagePoint) -> Self {
        Self {
            x_min: upper_left.x,
            y_min: upper_left.y,
            x_max: lower_right.x,
            y_max: lower_right.y,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn contains_rect(&self, other: &StageRect) -> bool {
        other.x_min >= self.x_min && other.y_min >= self.y_min && other.x_max <= self.x_max && other.y_max <= self.y_max
    }

    pub fn center(&self) -> StagePoint {
        StagePoint::new((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Corners in the order upper-left, upper-right, lower-right, lower-left.
    pub fn corners(&self) -> [StagePoint; 4] {
        [
            StagePoint::new(self.x_min, self.y_min),
            StagePoint::new(self.x_max, self.y_min),
            StagePoint::new(self.x_max, self.y_max),
            StagePoint::new(self.x_min, self.y_max),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverviewRegion {
    pub upper_left: StagePoint,
    pub lower_right: StagePoint,
    #[serde(default)]
    pub retained: bool,
}

impl OverviewRegion {
    pub fn new(upper_left: StagePoint, lower_right: StagePoint) -> Result<Self, PlannerError> {
        let region = Self {
            upper_left,
            lower_right,
            retained: false,
        };
        if !region.rect().is_valid() {
            return Err(PlannerError::Parameter(format!(
                "overview upper-left ({}, {}) must lie strictly above and left of lower-right ({}, {})",
                upper_left.x, upper_left.y, lower_right.x, lower_right.y
            )));
        }
        Ok(region)
    }

    pub fn rect(&self) -> StageRect {
        StageRect::from_corners(self.upper_left, self.lower_right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub id: usize,
    pub rect: StageRect,
}

impl Roi {
    pub fn validate_in(&self, overview: &OverviewRegion) -> Result<(), PlannerError> {
        if !self.rect.is_valid() {
            return Err(PlannerError::Parameter(format!("ROI {} has zero or negative area", self.id)));
        }
        if !overview.rect().contains_rect(&self.rect) {
            return Err(PlannerError::Parameter(format!("ROI {} extends beyond the overview region", self.id)));
        }
        Ok(())
    }
}

/// Timestep start times in seconds: t = 0, interval, ... up to and including
/// the duration.
pub fn schedule(params: &AcquisitionParams) -> Vec<f64> {
    let duration_min = params.duration_h * 60.0;
    let count = (duration_min / params.interval_min + 1e-9).floor() as usize + 1;
    (0..count).map(|k| k as f64 * params.interval_min * 60.0).collect()
}

/// Whether timestep `t` refreshes the focus plane.
pub fn is_autofocus_step(t: usize, every: AfUpdate) -> bool {
    match every {
        AfUpdate::OnlyAtBeginning => t == 0,
        AfUpdate::Every(k) => k > 0 && t % k == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(duration_h: f64, interval_min: f64) -> AcquisitionParams {
        AcquisitionParams {
            duration_h,
            interval_min,
            ..AcquisitionParams::default()
        }
    }

    #[test]
    fn eighteen_hours_every_ten_minutes() {
        let s = schedule(&params(18.0, 10.0));
        assert_eq!(s.len(), 109);
        assert_eq!(*s.last().unwrap(), 1080.0 * 60.0);
    }

    #[test]
    fn duration_equal_to_interval_gives_two_steps() {
        assert_eq!(schedule(&params(0.5, 30.0)).len(), 2);
    }

    #[test]
    fn autofocus_step_indices() {
        let every5: Vec<usize> = (0..11).filter(|&t| is_autofocus_step(t, AfUpdate::Every(5))).collect();
        assert_eq!(every5, vec![0, 5, 10]);
        let once: Vec<usize> = (0..10).filter(|&t| is_autofocus_step(t, AfUpdate::OnlyAtBeginning)).collect();
        assert_eq!(once, vec![0]);
    }

    #[test]
    fn overview_corner_order_enforced() {
        assert!(OverviewRegion::new(StagePoint::new(0.0, 0.0), StagePoint::new(10.0, 10.0)).is_ok());
        assert!(OverviewRegion::new(StagePoint::new(10.0, 0.0), StagePoint::new(0.0, 10.0)).is_err());
        assert!(OverviewRegion::new(StagePoint::new(0.0, 0.0), StagePoint::new(10.0, 0.0)).is_err());
    }

    #[test]
    fn roi_must_sit_inside_overview() {
        let ov = OverviewRegion::new(StagePoint::new(0.0, 0.0), StagePoint::new(100.0, 100.0)).unwrap();
        let inside = Roi {
            id: 0,
            rect: StageRect::from_corners(StagePoint::new(10.0, 10.0), StagePoint::new(50.0, 50.0)),
        };
        let outside = Roi {
            id: 1,
            rect: StageRect::from_corners(StagePoint::new(60.0, 60.0), StagePoint::new(150.0, 90.0)),
        };
        assert!(inside.validate_in(&ov).is_ok());
        assert!(outside.validate_in(&ov).is_err());
    }
}
