#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use tilescope::imaging::Channel;
use tilescope::microscope::{CameraConfig, ObjectiveSpec, SceneConfig, SimulatorConfig};
use tilescope::planner::{AcquisitionParams, AfUpdate, OverviewRegion, Roi, StagePoint, StageRect, StitchMode};

pub fn objectives(low_ratio: f64, high_ratio: f64) -> Vec<ObjectiveSpec> {
    vec![
        ObjectiveSpec {
            label: "4X".into(),
            magnification: 4.0,
            pixel_ratio: low_ratio,
            autofocus_capable: false,
            turret_position: 0,
        },
        ObjectiveSpec {
            label: "10X".into(),
            magnification: 10.0,
            pixel_ratio: high_ratio,
            autofocus_capable: true,
            turret_position: 1,
        },
    ]
}

/// 600x600 um maze specimen at 1 um/px, 64x64 sensor, 10X at 1 um/px.
pub fn small_sim(seed: u64) -> SimulatorConfig {
    SimulatorConfig {
        seed,
        scene: SceneConfig {
            width_px: 600,
            height_px: 600,
            um_per_px: 1.0,
            ..SceneConfig::default()
        },
        camera: CameraConfig {
            width: 64,
            height: 64,
            vignette_k: 0.0,
            read_noise_sigma: 1.0,
            photon_scale: 6.0,
        },
        objectives: objectives(2.0, 1.0),
        af_fail_probability: 0.0,
        af_sigma_um: 0.0,
        initial_stage: StagePoint::new(300.0, 300.0),
        ..SimulatorConfig::default()
    }
}

pub fn overview() -> OverviewRegion {
    OverviewRegion::new(StagePoint::new(100.0, 100.0), StagePoint::new(450.0, 450.0)).unwrap()
}

/// A 40x40 um ROI, which a 64 px field at 20% overlap covers with 2x2 tiles.
pub fn small_roi(id: usize, x: f64, y: f64) -> Roi {
    Roi {
        id,
        rect: StageRect {
            x_min: x,
            y_min: y,
            x_max: x + 40.0,
            y_max: y + 40.0,
        },
    }
}

pub fn params(steps: usize) -> AcquisitionParams {
    AcquisitionParams {
        name: "scan".into(),
        duration_h: (steps.max(2) - 1) as f64 * 10.0 / 60.0,
        interval_min: 10.0,
        channels: BTreeMap::from([(Channel::PC, 33.0)]),
        stitch_mode: StitchMode::GridPC,
        overlap: 0.2,
        af_update_every: AfUpdate::Every(5),
        objective: "10X".into(),
        stitching: tilescope::stitch::StitchSettings {
            max_search_px: 8,
            ..Default::default()
        },
        ..AcquisitionParams::default()
    }
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
