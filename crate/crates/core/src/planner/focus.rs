use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{PlannerError, StagePoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Fitted focus surface z = a*x + b*y + c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub fitted_at: usize,
    pub n_points: usize,
    pub residuals: Vec<f64>,
}

impl FocusPlane {
    /// Plane with no tilt at height `z`.
    pub fn flat(z: f64, fitted_at: usize) -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            c: z,
            fitted_at,
            n_points: 0,
            residuals: Vec::new(),
        }
    }
}

pub fn interpolate_z(plane: &FocusPlane, xy: StagePoint) -> f64 {
    plane.a * xy.x + plane.b * xy.y + plane.c
}

/// Least-squares plane through `points`. Coordinates are centred and scaled
/// before the solve so stage-scale values keep full precision.
pub fn fit_focus_plane(points: &[FocusPoint], fitted_at: usize) -> Result<FocusPlane, PlannerError> {
    if points.len() < 3 {
        return Err(PlannerError::DegenerateFit(format!("{} points, need at least 3", points.len())));
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
        return Err(PlannerError::DegenerateFit("non-finite measurement".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mz = points.iter().map(|p| p.z).sum::<f64>() / n;
    let scale = points
        .iter()
        .map(|p| (p.x - mx).abs().max((p.y - my).abs()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(PlannerError::DegenerateFit("all points coincide".into()));
    }
    let a_mat = DMatrix::from_fn(points.len(), 2, |i, j| {
        let p = &points[i];
        if j == 0 {
            (p.x - mx) / scale
        } else {
            (p.y - my) / scale
        }
    });
    let rhs = DVector::from_iterator(points.len(), points.iter().map(|p| p.z - mz));
    let svd = a_mat.svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if smin <= smax * 1e-9 {
        return Err(PlannerError::DegenerateFit("measurement positions are collinear".into()));
    }
    let sol = svd.solve(&rhs, 0.0).map_err(|e| PlannerError::DegenerateFit(e.to_string()))?;
    let a = sol[0] / scale;
    let b = sol[1] / scale;
    let c = mz - a * mx - b * my;
    let mut plane = FocusPlane {
        a,
        b,
        c,
        fitted_at,
        n_points: points.len(),
        residuals: Vec::new(),
    };
    plane.residuals = points
        .iter()
        .map(|p| p.z - interpolate_z(&plane, StagePoint::new(p.x, p.y)))
        .collect();
    Ok(plane)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(a: f64, b: f64, c: f64, side: f64) -> Vec<FocusPoint> {
        [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)]
            .iter()
            .map(|&(x, y)| FocusPoint { x, y, z: a * x + b * y + c })
            .collect()
    }

    /// Plain normal-equations solve of [x y 1] [a b c]^T = z by Cramer's rule.
    fn normal_equations(points: &[FocusPoint]) -> (f64, f64, f64) {
        let mut m = [[0.0f64; 3]; 3];
        let mut v = [0.0f64; 3];
        for p in points {
            let row = [p.x, p.y, 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += row[i] * row[j];
                }
                v[i] += row[i] * p.z;
            }
        }
        let det3 = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det3(&m);
        let solve = |col: usize| {
            let mut mc = m;
            for (i, row) in mc.iter_mut().enumerate() {
                row[col] = v[i];
            }
            det3(&mc) / d
        };
        (solve(0), solve(1), solve(2))
    }

    #[test]
    fn flat_plane() {
        let p = fit_focus_plane(&square(0.0, 0.0, 7.0, 100.0), 0).unwrap();
        assert!(p.a.abs() < 1e-12 && p.b.abs() < 1e-12 && (p.c - 7.0).abs() < 1e-12);
    }

    #[test]
    fn tilted_plane_recovered() {
        let p = fit_focus_plane(&square(0.001, 0.002, 5.0, 5000.0), 3).unwrap();
        assert!((p.a - 0.001).abs() < 1e-9);
        assert!((p.b - 0.002).abs() < 1e-9);
        assert!((p.c - 5.0).abs() < 1e-9);
        assert_eq!((p.fitted_at, p.n_points), (3, 4));
        assert!((interpolate_z(&p, StagePoint::new(1000.0, 2000.0)) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn perturbed_corner_matches_normal_equations() {
        let mut pts = square(0.001, -0.0005, 2.0, 4000.0);
        pts[2].z += 0.4;
        let p = fit_focus_plane(&pts, 0).unwrap();
        let (a, b, c) = normal_equations(&pts);
        assert!((p.a - a).abs() < 1e-12);
        assert!((p.b - b).abs() < 1e-12);
        assert!((p.c - c).abs() < 1e-9);
        assert!(p.residuals.iter().all(|r| (r.abs() - 0.1).abs() < 1e-9));
    }

    #[test]
    fn three_points_fit_exactly() {
        let pts = &square(0.003, 0.001, -1.0, 300.0)[..3];
        let p = fit_focus_plane(pts, 0).unwrap();
        assert!(p.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn degenerate_inputs() {
        let two = &square(0.0, 0.0, 1.0, 10.0)[..2];
        assert!(matches!(fit_focus_plane(two, 0), Err(PlannerError::DegenerateFit(_))));
        let line: Vec<_> = (0..4).map(|i| FocusPoint { x: i as f64, y: 2.0 * i as f64, z: 1.0 }).collect();
        assert!(matches!(fit_focus_plane(&line, 0), Err(PlannerError::DegenerateFit(_))));
    }

    #[test]
    fn centroid_value_is_mean_height() {
        let pts = square(0.01, 0.02, 3.0, 50.0);
        let p = fit_focus_plane(&pts, 0).unwrap();
        let mean = pts.iter().map(|q| q.z).sum::<f64>() / 4.0;
        assert!((interpolate_z(&p, StagePoint::new(25.0, 25.0)) - mean).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn linear_data_recovered(a in -0.01f64..0.01, b in -0.01f64..0.01, c in -100.0f64..100.0,
                                 x0 in 0.0f64..20000.0, y0 in 0.0f64..20000.0, side in 100.0f64..10000.0) {
            let pts: Vec<_> = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)]
                .iter()
                .map(|&(dx, dy)| {
                    let (x, y) = (x0 + dx, y0 + dy);
                    FocusPoint { x, y, z: a * x + b * y + c }
                })
                .collect();
            let p = fit_focus_plane(&pts, 0).unwrap();
            prop_assert!((p.a - a).abs() < 1e-9);
            prop_assert!((p.b - b).abs() < 1e-9);
            prop_assert!((p.c - c).abs() < 1e-9);
        }
    }
}
