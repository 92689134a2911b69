//! Synthetic specimen: per-channel truth rasters plus recorded motion.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{gaussian_blur, Channel, FloatImage, Translation};

use super::virtual_scope::rng_stream;

pub(crate) const STREAM_SCENE: u64 = 1;
pub(crate) const STREAM_DRIFT: u64 = 5;
pub(crate) const STREAM_REGION_BASE: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenePattern {
    /// Random blobs and wall segments, the default specimen.
    Maze {
        #[serde(default = "default_blob_area")]
        px_per_blob: f64,
        #[serde(default = "default_wall_area")]
        px_per_wall: f64,
    },
    /// Featureless reference sample (clean slide / dye layer).
    Uniform { level: f64 },
}

fn default_blob_area() -> f64 {
    140.0
}

fn default_wall_area() -> f64 {
    900.0
}

impl Default for ScenePattern {
    fn default() -> Self {
        ScenePattern::Maze {
            px_per_blob: default_blob_area(),
            px_per_wall: default_wall_area(),
        }
    }
}

/// Bright Gaussian marker added to every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fiducial {
    pub x_um: f64,
    pub y_um: f64,
    pub sigma_px: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width_px: usize,
    pub height_px: usize,
    /// Size of one truth pixel in micrometres.
    pub um_per_px: f64,
    #[serde(default)]
    pub pattern: ScenePattern,
    #[serde(default)]
    pub fiducials: Vec<Fiducial>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width_px: 1024,
            height_px: 1024,
            um_per_px: 1.0,
            pattern: ScenePattern::default(),
            fiducials: Vec::new(),
        }
    }
}

/// Stage-drift process: linear rate plus a Gaussian random walk, both per axis,
/// sampled at knots every `step_s` seconds and interpolated linearly between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    #[serde(default = "default_step_s")]
    pub step_s: f64,
    #[serde(default)]
    pub rate_um_per_h: [f64; 2],
    #[serde(default)]
    pub walk_sigma_um: f64,
    #[serde(default = "default_horizon")]
    pub horizon_steps: usize,
}

fn default_step_s() -> f64 {
    600.0
}

fn default_horizon() -> usize {
    4096
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            step_s: default_step_s(),
            rate_um_per_h: [0.0, 0.0],
            walk_sigma_um: 0.0,
            horizon_steps: default_horizon(),
        }
    }
}

/// A stage-fixed window whose content moves on its own trajectory instead of
/// following the specimen drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingRegion {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default)]
    pub rate_um_per_h: [f64; 2],
    pub walk_sigma_um: f64,
}

impl MovingRegion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// Recorded displacement knots in micrometres.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    step_s: f64,
    knots: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn generate(step_s: f64, rate_um_per_h: [f64; 2], walk_sigma_um: f64, horizon: usize, rng: &mut ChaCha8Rng) -> Self {
        let per_step = [rate_um_per_h[0] * step_s / 3600.0, rate_um_per_h[1] * step_s / 3600.0];
        let walk = (walk_sigma_um > 0.0).then(|| Normal::new(0.0, walk_sigma_um).expect("positive sigma"));
        let mut knots = Vec::with_capacity(horizon + 1);
        let mut pos = [0.0f64; 2];
        knots.push(pos);
        for _ in 0..horizon {
            for axis in 0..2 {
                let noise = walk.map(|n| n.sample(rng)).unwrap_or(0.0);
                pos[axis] += per_step[axis] + noise;
            }
            knots.push(pos);
        }
        Self { step_s, knots }
    }

    pub fn knot(&self, step: usize) -> [f64; 2] {
        let last = self.knots.len() - 1;
        if step <= last {
            return self.knots[step];
        }
        // past the horizon: extrapolate from the final segment
        let a = self.knots[last.saturating_sub(1)];
        let b = self.knots[last];
        let extra = (step - last) as f64;
        [b[0] + (b[0] - a[0]) * extra, b[1] + (b[1] - a[1]) * extra]
    }

    pub fn at(&self, time_s: f64) -> [f64; 2] {
        let pos = (time_s.max(0.0)) / self.step_s;
        let k = pos.floor() as usize;
        let f = pos - k as f64;
        let a = self.knot(k);
        if f == 0.0 {
            return a;
        }
        let b = self.knot(k + 1);
        [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f]
    }
}

/// Truth rasters and motion of the simulated specimen.
#[derive(Debug, Clone)]
pub struct SpecimenScene {
    pub config: SceneConfig,
    truth: [FloatImage; 3],
    drift: Trajectory,
    regions: Vec<(MovingRegion, Trajectory)>,
}

fn channel_index(ch: Channel) -> usize {
    match ch {
        Channel::BF => 0,
        Channel::PC => 1,
        Channel::FL => 2,
    }
}

fn add_gaussian(img: &mut FloatImage, cx: f64, cy: f64, sigma: f64, amp: f64) {
    let r = (3.0 * sigma).ceil() as i64;
    let x0 = (cx.floor() as i64 - r).max(0);
    let x1 = (cx.floor() as i64 + r + 1).min(img.width as i64 - 1);
    let y0 = (cy.floor() as i64 - r).max(0);
    let y1 = (cy.floor() as i64 + r + 1).min(img.height as i64 - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let i = y as usize * img.width + x as usize;
            img.data[i] += (amp * (-d2 * inv).exp()) as f32;
        }
    }
}

fn maze_texture(w: usize, h: usize, px_per_blob: f64, px_per_wall: f64, rng: &mut ChaCha8Rng) -> (FloatImage, FloatImage) {
    let area = (w * h) as f64;
    let mut walls = FloatImage::new(w, h);
    let n_walls = (area / px_per_wall).round() as usize;
    for _ in 0..n_walls {
        let x = rng.random_range(0..w) as i64;
        let y = rng.random_range(0..h) as i64;
        let len = rng.random_range(10..60) as i64;
        let thick = rng.random_range(2..5) as i64;
        let horizontal = rng.random_bool(0.5);
        let (dx, dy) = if horizontal { (len, thick) } else { (thick, len) };
        for yy in y..(y + dy).min(h as i64) {
            for xx in x..(x + dx).min(w as i64) {
                walls.data[yy as usize * w + xx as usize] = 1.0;
            }
        }
    }
    let mut tex = gaussian_blur(&walls, 1.0);
    tex.data.iter_mut().for_each(|v| *v *= 0.6);
    let n_blobs = (area / px_per_blob).round() as usize;
    for _ in 0..n_blobs {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sigma = rng.random_range(1.2..4.0);
        let amp = rng.random_range(0.4..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        add_gaussian(&mut tex, cx, cy, sigma, amp);
    }
    let peak = tex.data.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    tex.data.iter_mut().for_each(|v| *v /= peak);

    let mut cells = FloatImage::new(w, h);
    let n_cells = (area / (px_per_blob * 6.0)).round() as usize;
    for _ in 0..n_cells {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sigma = rng.random_range(2.0..5.0);
        add_gaussian(&mut cells, cx, cy, sigma, rng.random_range(0.5..1.0));
    }
    cells.data.iter_mut().for_each(|v| *v = v.min(1.0));
    (tex, cells)
}

impl SpecimenScene {
    pub fn generate(config: SceneConfig, drift: &DriftConfig, regions: &[MovingRegion], seed: u64) -> Self {
        let (w, h) = (config.width_px, config.height_px);
        let mut truth = match &config.pattern {
            ScenePattern::Uniform { level } => {
                let l = *level as f32;
                [FloatImage::filled(w, h, l), FloatImage::filled(w, h, l), FloatImage::filled(w, h, l)]
            }
            ScenePattern::Maze { px_per_blob, px_per_wall } => {
                let mut rng = rng_stream(seed, STREAM_SCENE);
                let (tex, cells) = maze_texture(w, h, *px_per_blob, *px_per_wall, &mut rng);
                let map = |base: f32, amp: f32| FloatImage {
                    width: w,
                    height: h,
                    data: tex.data.iter().map(|&t| (base + amp * t).max(0.0)).collect(),
                };
                let fl = FloatImage {
                    width: w,
                    height: h,
                    data: cells.data.iter().map(|&c| 0.03 + 0.9 * c).collect(),
                };
                [map(0.75, 0.12), map(0.45, 0.35), fl]
            }
        };
        for f in &config.fiducials {
            for t in truth.iter_mut() {
                let cx = f.x_um / config.um_per_px - 0.5;
                let cy = f.y_um / config.um_per_px - 0.5;
                add_gaussian(t, cx, cy, f.sigma_px, f.amplitude);
            }
        }
        let drift_traj = Trajectory::generate(
            drift.step_s,
            drift.rate_um_per_h,
            drift.walk_sigma_um,
            drift.horizon_steps,
            &mut rng_stream(seed, STREAM_DRIFT),
        );
        let regions = regions
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let traj = Trajectory::generate(
                    drift.step_s,
                    r.rate_um_per_h,
                    r.walk_sigma_um,
                    drift.horizon_steps,
                    &mut rng_stream(seed, STREAM_REGION_BASE + i as u64),
                );
                (r.clone(), traj)
            })
            .collect();
        Self {
            config,
            truth,
            drift: drift_traj,
            regions,
        }
    }

    pub fn truth(&self, ch: Channel) -> &FloatImage {
        &self.truth[channel_index(ch)]
    }

    pub fn drift(&self) -> &Trajectory {
        &self.drift
    }

    /// Stage-space extent of the specimen in micrometres.
    pub fn extent_um(&self) -> (f64, f64) {
        (
            self.config.width_px as f64 * self.config.um_per_px,
            self.config.height_px as f64 * self.config.um_per_px,
        )
    }

    pub fn global_displacement(&self, time_s: f64) -> Translation {
        let d = self.drift.at(time_s);
        Translation::new(d[0], d[1])
    }

    /// Content displacement (um) seen at stage position `(x, y)` and time `t`.
    pub fn displacement_at(&self, x: f64, y: f64, time_s: f64) -> Translation {
        for (region, traj) in &self.regions {
            if region.contains(x, y) {
                let d = traj.at(time_s);
                return Translation::new(d[0], d[1]);
            }
        }
        self.global_displacement(time_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_trajectory_stays_at_origin() {
        let traj = Trajectory::generate(600.0, [0.0, 0.0], 0.0, 50, &mut rng_stream(3, STREAM_DRIFT));
        for k in 0..60 {
            assert_eq!(traj.knot(k), [0.0, 0.0]);
        }
    }

    #[test]
    fn linear_trajectory_interpolates() {
        // 6 um/h with 10-minute knots = 1 um per step
        let traj = Trajectory::generate(600.0, [6.0, 0.0], 0.0, 20, &mut rng_stream(1, STREAM_DRIFT));
        assert!((traj.knot(13)[0] - 13.0).abs() < 1e-12);
        assert!((traj.at(900.0)[0] - 1.5).abs() < 1e-12);
        // extrapolation past the horizon keeps the slope
        assert!((traj.knot(25)[0] - 25.0).abs() < 1e-9);
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = SceneConfig {
            width_px: 64,
            height_px: 48,
            ..SceneConfig::default()
        };
        let a = SpecimenScene::generate(cfg.clone(), &DriftConfig::default(), &[], 9);
        let b = SpecimenScene::generate(cfg.clone(), &DriftConfig::default(), &[], 9);
        let c = SpecimenScene::generate(cfg, &DriftConfig::default(), &[], 10);
        assert_eq!(a.truth(Channel::PC), b.truth(Channel::PC));
        assert_ne!(a.truth(Channel::PC), c.truth(Channel::PC));
        assert!(a.truth(Channel::PC).data.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn moving_region_overrides_global_drift() {
        let region = MovingRegion {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 10.0,
            y_max: 10.0,
            rate_um_per_h: [-60.0, 0.0],
            walk_sigma_um: 0.0,
        };
        let drift = DriftConfig {
            rate_um_per_h: [6.0, 0.0],
            ..DriftConfig::default()
        };
        let scene = SpecimenScene::generate(
            SceneConfig {
                width_px: 32,
                height_px: 32,
                ..SceneConfig::default()
            },
            &drift,
            &[region],
            1,
        );
        assert!((scene.displacement_at(5.0, 5.0, 600.0).dx + 10.0).abs() < 1e-12);
        assert!((scene.displacement_at(20.0, 5.0, 600.0).dx - 1.0).abs() < 1e-12);
    }
}
