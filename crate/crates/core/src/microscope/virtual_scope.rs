use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{DriftConfig, MovingRegion, SceneConfig, SpecimenScene};
use super::{AutofocusOutcome, HardwareError, Microscope, MicroscopeState, ObjectiveSpec};
use crate::imaging::{gaussian_blur, sample_bilinear, BitDepth, Channel, FloatImage, Image, Translation};
use crate::planner::StagePoint;

const STREAM_NOISE: u64 = 2;
const STREAM_JITTER: u64 = 3;
const STREAM_AF: u64 = 4;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// In-focus surface z = a*x + b*y + c over stage coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FocalPlaneTruth {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl FocalPlaneTruth {
    pub fn z_at(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y + self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Quadratic vignette strength: g(r) = 1 - k (r / r_max)^2.
    #[serde(default)]
    pub vignette_k: f64,
    #[serde(default)]
    pub read_noise_sigma: f64,
    /// Intensity levels per millisecond of exposure for a unit-reflectance scene.
    pub photon_scale: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 2048,
            height: 2048,
            vignette_k: 0.0,
            read_noise_sigma: 0.0,
            photon_scale: 6.0,
        }
    }
}

impl CameraConfig {
    /// Vignette gain at sensor pixel `(x, y)`, 1 at the optical centre.
    pub fn gain(&self, x: usize, y: usize) -> f64 {
        if self.vignette_k == 0.0 {
            return 1.0;
        }
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        let rmax2 = cx * cx + cy * cy;
        if rmax2 == 0.0 {
            return 1.0;
        }
        1.0 - self.vignette_k * r2 / rmax2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latencies {
    pub objective_s: f64,
    pub channel_s: f64,
    /// Extra settling time when switching between BF and PC condenser setups.
    pub condenser_s: f64,
    pub autofocus_s: f64,
}

impl Default for Latencies {
    fn default() -> Self {
        Self {
            objective_s: 2.0,
            channel_s: 0.5,
            condenser_s: 0.5,
            autofocus_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub drift: DriftConfig,
    pub moving_regions: Vec<MovingRegion>,
    pub focal_plane: FocalPlaneTruth,
    /// Blur sigma in sensor pixels per micrometre of defocus.
    pub defocus_px_per_um: f64,
    pub camera: CameraConfig,
    pub objectives: Vec<ObjectiveSpec>,
    pub latencies: Latencies,
    /// Positional jitter sigma (um) at `reference_speed`; scales linearly with speed.
    pub vibration_sigma_um: f64,
    pub reference_speed: f64,
    pub af_fail_probability: f64,
    pub af_sigma_um: f64,
    pub initial_stage: StagePoint,
    pub initial_speed: f64,
    pub initial_z: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            drift: DriftConfig::default(),
            moving_regions: Vec::new(),
            focal_plane: FocalPlaneTruth::default(),
            defocus_px_per_um: 0.5,
            camera: CameraConfig::default(),
            objectives: vec![
                ObjectiveSpec {
                    label: "4X".into(),
                    magnification: 4.0,
                    pixel_ratio: 1.625,
                    autofocus_capable: false,
                    turret_position: 0,
                },
                ObjectiveSpec {
                    label: "10X".into(),
                    magnification: 10.0,
                    pixel_ratio: 0.65,
                    autofocus_capable: true,
                    turret_position: 1,
                },
            ],
            latencies: Latencies::default(),
            vibration_sigma_um: 0.0,
            reference_speed: 1000.0,
            af_fail_probability: 0.05,
            af_sigma_um: 0.2,
            initial_stage: StagePoint::new(0.0, 0.0),
            initial_speed: 1000.0,
            initial_z: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HwEventKind {
    StageMoved { x: f64, y: f64 },
    ZMoved { z: f64 },
    ObjectiveChanged { position: usize },
    ChannelChanged { channel: Channel },
    ShutterOpened,
    ShutterClosed,
    SnapStart { channel: Channel },
    SnapEnd { channel: Channel },
    Autofocus { success: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HwEvent {
    pub time_s: f64,
    #[serde(flatten)]
    pub kind: HwEventKind,
}

/// Simulated microscope with a recorded, queryable ground truth.
#[derive(Debug)]
pub struct VirtualMicroscope {
    config: SimulatorConfig,
    scene: SpecimenScene,
    state: MicroscopeState,
    noise_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
    af_rng: ChaCha8Rng,
    events: Vec<HwEvent>,
}

impl VirtualMicroscope {
    pub fn new(config: SimulatorConfig) -> Result<Self, HardwareError> {
        super::validate_turret(&config.objectives)?;
        if !(config.initial_speed > 0.0) {
            return Err(HardwareError::Parameter("initial stage speed must be positive".into()));
        }
        if config.camera.width == 0 || config.camera.height == 0 {
            return Err(HardwareError::Parameter("sensor must be at least 1x1".into()));
        }
        if !(0.0..=0.5).contains(&config.camera.vignette_k) {
            return Err(HardwareError::Parameter("vignette_k must lie in [0, 0.5]".into()));
        }
        let scene = SpecimenScene::generate(config.scene.clone(), &config.drift, &config.moving_regions, config.seed);
        let first = config.objectives.iter().map(|o| o.turret_position).min().expect("validated turret");
        let state = MicroscopeState {
            stage_xy: config.initial_stage,
            stage_speed: config.initial_speed,
            objective: first,
            z: config.initial_z,
            channel: Channel::PC,
            exposure_ms: BTreeMap::new(),
            fl_shutter_open: false,
            illumination: 1.0,
            bit_depth: BitDepth::Sixteen,
            sim_clock: 0.0,
        };
        Ok(Self {
            noise_rng: rng_stream(config.seed, STREAM_NOISE),
            jitter_rng: rng_stream(config.seed, STREAM_JITTER),
            af_rng: rng_stream(config.seed, STREAM_AF),
            scene,
            state,
            config,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    pub fn scene(&self) -> &SpecimenScene {
        &self.scene
    }

    pub fn events(&self) -> &[HwEvent] {
        &self.events
    }

    /// Replace the specimen (e.g. with a reference slide) keeping seed and motion.
    pub fn swap_specimen(&mut self, scene: SceneConfig) {
        self.scene = SpecimenScene::generate(scene, &self.config.drift, &self.config.moving_regions, self.config.seed);
        self.config.scene = self.scene.config.clone();
    }

    pub fn set_af_failure_probability(&mut self, p: f64) {
        self.config.af_fail_probability = p.clamp(0.0, 1.0);
    }

    /// Cumulative global drift at a drift-model step, in pixels of the current objective.
    pub fn true_drift(&self, timestep: usize) -> Translation {
        let d = self.scene.drift().knot(timestep);
        let ratio = self.current_ratio();
        Translation::new(d[0] / ratio, d[1] / ratio)
    }

    /// Global drift in micrometres at simulated time `t_s`.
    pub fn true_drift_um_at(&self, t_s: f64) -> Translation {
        let d = self.scene.drift().at(t_s);
        Translation::new(d[0], d[1])
    }

    pub fn current_ratio(&self) -> f64 {
        self.current_objective().map(|o| o.pixel_ratio).expect("objective index validated")
    }

    /// Field of view of the current objective in micrometres.
    pub fn fov_um(&self) -> (f64, f64) {
        let r = self.current_ratio();
        (self.config.camera.width as f64 * r, self.config.camera.height as f64 * r)
    }

    fn log(&mut self, kind: HwEventKind) {
        self.events.push(HwEvent {
            time_s: self.state.sim_clock,
            kind,
        });
    }

    fn advance(&mut self, dt: f64) {
        if dt > 0.0 {
            self.state.sim_clock += dt;
        }
    }

    fn render(&mut self) -> Result<Image, HardwareError> {
        let cam = self.config.camera.clone();
        let (w, h) = (cam.width, cam.height);
        let ratio = self.current_ratio();
        let res = self.scene.config.um_per_px;
        let n = ((ratio / res) - 1e-9).ceil().max(1.0) as usize;
        let ch = self.state.channel;
        let dark = ch == Channel::FL && !self.state.fl_shutter_open;

        let jitter_sigma = self.config.vibration_sigma_um * self.state.stage_speed / self.config.reference_speed;
        let jitter = if jitter_sigma > 0.0 {
            let nd = Normal::new(0.0, jitter_sigma).expect("positive sigma");
            Translation::new(nd.sample(&mut self.jitter_rng), nd.sample(&mut self.jitter_rng))
        } else {
            Translation::ZERO
        };

        let stage = self.state.stage_xy;
        let t = self.state.sim_clock;
        let x0 = stage.x - w as f64 / 2.0 * ratio;
        let y0 = stage.y - h as f64 / 2.0 * ratio;
        let mut sensor = FloatImage::new(w, h);
        if !dark {
            let truth = self.scene.truth(ch);
            let scene = &self.scene;
            let global = scene.global_displacement(t);
            let uniform_motion = self.config.moving_regions.is_empty();
            let out_of_bounds = std::sync::atomic::AtomicBool::new(false);
            sensor.data.par_chunks_mut(w).enumerate().for_each(|(j, row)| {
                for (i, px) in row.iter_mut().enumerate() {
                    let px_x = x0 + i as f64 * ratio;
                    let px_y = y0 + j as f64 * ratio;
                    let disp = if uniform_motion {
                        global
                    } else {
                        scene.displacement_at(px_x + ratio / 2.0, px_y + ratio / 2.0, t)
                    };
                    let mut acc = 0.0;
                    for sy in 0..n {
                        let wy = px_y + (sy as f64 + 0.5) / n as f64 * ratio - disp.dy - jitter.dy;
                        for sx in 0..n {
                            let wx = px_x + (sx as f64 + 0.5) / n as f64 * ratio - disp.dx - jitter.dx;
                            match sample_bilinear(truth, wx / res - 0.5, wy / res - 0.5) {
                                Some(v) => acc += v,
                                None => {
                                    out_of_bounds.store(true, std::sync::atomic::Ordering::Relaxed);
                                    return;
                                }
                            }
                        }
                    }
                    *px = (acc / (n * n) as f64) as f32;
                }
            });
            if out_of_bounds.into_inner() {
                return Err(HardwareError::SceneBounds { x: stage.x, y: stage.y });
            }
            let dz = (self.state.z - self.config.focal_plane.z_at(stage.x, stage.y)).abs();
            let sigma = self.config.defocus_px_per_um * dz;
            if sigma > 0.05 {
                sensor = gaussian_blur(&sensor, sigma);
            }
            let exposure = self.state.exposure_ms[&ch];
            let scale = exposure * cam.photon_scale * self.state.illumination;
            for j in 0..h {
                for i in 0..w {
                    let v = sensor.get(i, j) as f64 * cam.gain(i, j) * scale;
                    sensor.set(i, j, v as f32);
                }
            }
        }
        if cam.read_noise_sigma > 0.0 {
            let nd = Normal::new(0.0, cam.read_noise_sigma).expect("positive sigma");
            for v in sensor.data.iter_mut() {
                *v += nd.sample(&mut self.noise_rng) as f32;
            }
        }
        Ok(sensor.quantize(self.state.bit_depth, ratio, ch))
    }
}

impl Microscope for VirtualMicroscope {
    fn state(&self) -> MicroscopeState {
        self.state.clone()
    }

    fn objectives(&self) -> Vec<ObjectiveSpec> {
        self.config.objectives.clone()
    }

    fn sensor_size(&self) -> (usize, usize) {
        (self.config.camera.width, self.config.camera.height)
    }

    fn set_stage_xy(&mut self, target: StagePoint) -> Result<f64, HardwareError> {
        let (ex, ey) = self.scene.extent_um();
        if !(target.x.is_finite() && target.y.is_finite()) || target.x < 0.0 || target.y < 0.0 || target.x > ex || target.y > ey {
            return Err(HardwareError::TravelLimit { x: target.x, y: target.y });
        }
        let d = (target.x - self.state.stage_xy.x).hypot(target.y - self.state.stage_xy.y);
        let elapsed = d / self.state.stage_speed;
        self.state.stage_xy = target;
        self.advance(elapsed);
        if d > 0.0 {
            self.log(HwEventKind::StageMoved { x: target.x, y: target.y });
        }
        Ok(elapsed)
    }

    fn set_stage_speed(&mut self, um_per_s: f64) -> Result<(), HardwareError> {
        if !(um_per_s.is_finite() && um_per_s > 0.0) {
            return Err(HardwareError::Parameter(format!("stage speed must be positive, got {um_per_s}")));
        }
        self.state.stage_speed = um_per_s;
        Ok(())
    }

    fn set_z(&mut self, z_um: f64) -> Result<(), HardwareError> {
        if !z_um.is_finite() {
            return Err(HardwareError::Parameter("z must be finite".into()));
        }
        if z_um != self.state.z {
            self.state.z = z_um;
            self.log(HwEventKind::ZMoved { z: z_um });
        }
        Ok(())
    }

    fn set_objective(&mut self, turret_position: usize) -> Result<(), HardwareError> {
        if !self.config.objectives.iter().any(|o| o.turret_position == turret_position) {
            return Err(HardwareError::Parameter(format!("no objective at turret position {turret_position}")));
        }
        if turret_position != self.state.objective {
            self.state.objective = turret_position;
            self.advance(self.config.latencies.objective_s);
            self.log(HwEventKind::ObjectiveChanged { position: turret_position });
        }
        Ok(())
    }

    fn set_channel(&mut self, channel: Channel) -> Result<(), HardwareError> {
        let prev = self.state.channel;
        if channel == prev {
            return Ok(());
        }
        if prev == Channel::FL && self.state.fl_shutter_open {
            self.state.fl_shutter_open = false;
            self.log(HwEventKind::ShutterClosed);
        }
        let mut dt = self.config.latencies.channel_s;
        if matches!((prev, channel), (Channel::BF, Channel::PC) | (Channel::PC, Channel::BF)) {
            dt += self.config.latencies.condenser_s;
        }
        self.state.channel = channel;
        self.advance(dt);
        self.log(HwEventKind::ChannelChanged { channel });
        Ok(())
    }

    fn set_exposure(&mut self, channel: Channel, ms: f64) -> Result<(), HardwareError> {
        if !(ms.is_finite() && ms > 0.0) {
            return Err(HardwareError::Parameter(format!("exposure must be positive, got {ms} ms")));
        }
        self.state.exposure_ms.insert(channel, ms);
        Ok(())
    }

    fn set_fl_shutter(&mut self, open: bool) -> Result<(), HardwareError> {
        if open && self.state.channel != Channel::FL {
            return Err(HardwareError::Parameter("fluorescence shutter opens only in the FL channel".into()));
        }
        if open != self.state.fl_shutter_open {
            self.state.fl_shutter_open = open;
            self.log(if open { HwEventKind::ShutterOpened } else { HwEventKind::ShutterClosed });
        }
        Ok(())
    }

    fn set_illumination(&mut self, fraction: f64) -> Result<(), HardwareError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(HardwareError::Parameter(format!("illumination must lie in [0, 1], got {fraction}")));
        }
        self.state.illumination = fraction;
        Ok(())
    }

    fn set_bit_depth(&mut self, depth: BitDepth) -> Result<(), HardwareError> {
        self.state.bit_depth = depth;
        Ok(())
    }

    fn snap_image(&mut self) -> Result<Image, HardwareError> {
        let ch = self.state.channel;
        let exposure = *self.state.exposure_ms.get(&ch).ok_or(HardwareError::ExposureUnset(ch))?;
        self.log(HwEventKind::SnapStart { channel: ch });
        let img = self.render()?;
        self.advance(exposure / 1000.0);
        self.log(HwEventKind::SnapEnd { channel: ch });
        Ok(img)
    }

    fn autofocus(&mut self) -> Result<AutofocusOutcome, HardwareError> {
        let obj = self.current_objective().expect("objective index validated");
        if !obj.autofocus_capable {
            return Err(HardwareError::Capability {
                position: obj.turret_position,
                label: obj.label,
            });
        }
        self.advance(self.config.latencies.autofocus_s);
        let u: f64 = self.af_rng.random();
        let outcome = if u < self.config.af_fail_probability {
            AutofocusOutcome::Failed
        } else {
            let p = self.state.stage_xy;
            let noise = if self.config.af_sigma_um > 0.0 {
                Normal::new(0.0, self.config.af_sigma_um).expect("positive sigma").sample(&mut self.af_rng)
            } else {
                0.0
            };
            AutofocusOutcome::Measured(self.config.focal_plane.z_at(p.x, p.y) + noise)
        };
        self.log(HwEventKind::Autofocus {
            success: matches!(outcome, AutofocusOutcome::Measured(_)),
        });
        Ok(outcome)
    }

    fn wait_until(&mut self, t_s: f64) {
        if t_s > self.state.sim_clock {
            self.state.sim_clock = t_s;
        }
    }
}
