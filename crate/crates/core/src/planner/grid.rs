use serde::{Deserialize, Serialize};

use super::{PlannerError, Roi, StagePoint};

/// Tile grid for one ROI. Centres are row-major; `route` lists indices into
/// `centers` in visiting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub roi_id: usize,
    pub rows: usize,
    pub cols: usize,
    /// Field of view (width, height) in micrometres.
    pub fov: (f64, f64),
    pub overlap: f64,
    pub centers: Vec<StagePoint>,
    pub route: Vec<usize>,
    pub z_per_tile: Vec<f64>,
    pub z_stack: Vec<f64>,
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn stride(&self) -> (f64, f64) {
        (self.fov.0 * (1.0 - self.overlap), self.fov.1 * (1.0 - self.overlap))
    }
}

/// Tiles along one axis: ceil(extent / stride) + 1.
pub fn tile_count(extent: f64, fov: f64, overlap: f64) -> usize {
    let stride = fov * (1.0 - overlap);
    // the epsilon keeps exact multiples from picking up a spurious extra tile
    (extent / stride - 1e-9).ceil().max(0.0) as usize + 1
}

pub fn compute_tile_grid(roi: &Roi, fov: (f64, f64), overlap: f64) -> Result<TilePlan, PlannerError> {
    if !(overlap.is_finite() && (0.0..1.0).contains(&overlap)) {
        return Err(PlannerError::Parameter(format!("overlap {overlap} must lie in [0, 1)")));
    }
    if !(fov.0 > 0.0 && fov.1 > 0.0 && fov.0.is_finite() && fov.1.is_finite()) {
        return Err(PlannerError::Parameter("field of view must be positive".into()));
    }
    if !roi.rect.is_valid() {
        return Err(PlannerError::Parameter(format!("ROI {} is degenerate", roi.id)));
    }
    let cols = tile_count(roi.rect.width(), fov.0, overlap);
    let rows = tile_count(roi.rect.height(), fov.1, overlap);
    let (sx, sy) = (fov.0 * (1.0 - overlap), fov.1 * (1.0 - overlap));
    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            centers.push(StagePoint::new(
                roi.rect.x_min + fov.0 / 2.0 + c as f64 * sx,
                roi.rect.y_min + fov.1 / 2.0 + r as f64 * sy,
            ));
        }
    }
    let n = centers.len();
    Ok(TilePlan {
        roi_id: roi.id,
        rows,
        cols,
        fov,
        overlap,
        centers,
        route: (0..n).collect(),
        z_per_tile: vec![0.0; n],
        z_stack: vec![0.0],
    })
}

/// Z offsets of a stack, centred on the middle of `[z_min, z_max]`.
pub fn z_stack(z_min: f64, z_max: f64, z_step: f64) -> Vec<f64> {
    if z_step <= 0.0 || z_max <= z_min {
        return vec![0.0];
    }
    let n = ((z_max - z_min) / z_step + 1e-9).floor() as usize + 1;
    let mid = (z_min + z_max) / 2.0;
    (0..n).map(|k| z_min + k as f64 * z_step - mid).collect()
}
