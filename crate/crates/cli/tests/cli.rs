use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilescope::acquisition::layout::{parse_stitched_file_name, parse_tile_file_name};
use tilescope::acquisition::parse_log;
use tilescope::config::{FlatteningConfig, SystemConfig};
use tilescope::imaging::{load_tiff, save_tiff, BitDepth, Channel, Image};
use tilescope::microscope::{CameraConfig, ObjectiveSpec, SceneConfig, SimulatorConfig};
use tilescope::planner::{AcquisitionParams, AfUpdate, OverviewRegion, StagePoint, StageRect, StitchMode};
use tilescope::stitch::StitchSettings;

fn tilescope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilescope")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 600x600 um specimen, 64x64 sensor, 10X at 1 um/px; one ROI of `roi_um`
/// square at (150, 150) inside a (100, 100)-(450, 450) overview.
fn config(steps: usize, roi_um: f64) -> SystemConfig {
    let objective = |label: &str, mag: f64, ratio: f64, af: bool, pos: usize| ObjectiveSpec {
        label: label.into(),
        magnification: mag,
        pixel_ratio: ratio,
        autofocus_capable: af,
        turret_position: pos,
    };
    SystemConfig {
        simulator: SimulatorConfig {
            seed: 11,
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
            objectives: vec![objective("4X", 4.0, 2.0, false, 0), objective("10X", 10.0, 1.0, true, 1)],
            af_fail_probability: 0.0,
            af_sigma_um: 0.0,
            initial_stage: StagePoint::new(300.0, 300.0),
            ..SimulatorConfig::default()
        },
        params: AcquisitionParams {
            name: "scan".into(),
            duration_h: (steps - 1) as f64 * 10.0 / 60.0,
            interval_min: 10.0,
            channels: BTreeMap::from([(Channel::PC, 33.0)]),
            stitch_mode: StitchMode::GridPC,
            overlap: 0.2,
            af_update_every: AfUpdate::Every(5),
            objective: "10X".into(),
            stitching: StitchSettings {
                max_search_px: 8,
                ..StitchSettings::default()
            },
            ..AcquisitionParams::default()
        },
        overview: Some(OverviewRegion::new(StagePoint::new(100.0, 100.0), StagePoint::new(450.0, 450.0)).unwrap()),
        rois: vec![StageRect {
            x_min: 150.0,
            y_min: 150.0,
            x_max: 150.0 + roi_um,
            y_max: 150.0 + roi_um,
        }],
        ..SystemConfig::default()
    }
}

fn write_config(dir: &Path, c: &SystemConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(c).unwrap()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
        .collect();
    v.sort();
    v
}

/// Every file under `root` with its bytes, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
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

fn textured(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..60000.0)).collect();
    Image::from_fn(w, h, BitDepth::Sixteen, 1.0, Channel::PC, |x, y| values[y * w + x])
}

#[test]
fn minimal_acquisition_writes_tiles_and_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(2, 40.0));
    let out = dir.path().join("run");
    let o = tilescope(&["acquire", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let roi = files(&out.join("roi00"));
    let tiles = roi.iter().filter(|f| parse_tile_file_name(f).is_some()).count();
    let stitched = roi.iter().filter(|f| parse_stitched_file_name(f).is_some()).count();
    assert_eq!(tiles, 4 * 2);
    assert_eq!(stitched, 2);
    assert!(out.join("AcquisitionLog.txt").exists());
    assert!(out.join("overview/overview_PC.tif").exists());
}

#[test]
fn eighteen_hour_run_gives_109_frames() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(2, 250.0);
    c.params.duration_h = 18.0;
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("run");
    let o = tilescope(&["acquire", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let roi = files(&out.join("roi00"));
    assert_eq!(roi.iter().filter(|f| parse_stitched_file_name(f).is_some()).count(), 109);
    // 250 um at a 51.2 um stride: 6 x 6 tiles
    assert_eq!(roi.iter().filter(|f| parse_tile_file_name(f).is_some()).count(), 109 * 36);
    let log = parse_log(&std::fs::read_to_string(out.join("AcquisitionLog.txt")).unwrap()).unwrap();
    assert!(!log.is_empty());
}

#[test]
fn missing_corners_exit_2_naming_overview() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(2, 40.0);
    c.overview = None;
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("run");
    let o = tilescope(&["acquire", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("overview"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn invalid_parameters_and_unreadable_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(2, 40.0);
    c.params.interval_min = 0.0;
    let cfg = write_config(dir.path(), &c);
    let o = tilescope(&["acquire", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("params.interval_min"), "{}", stderr(&o));

    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(tilescope(&["acquire", "--config", s(&cfg)]).status.code(), Some(2));
    assert_eq!(tilescope(&["stitch", "--mode", "sideways", "--overlap", "0", "."]).status.code(), Some(2));
}

#[test]
fn same_seed_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &config(3, 40.0));
    let (a, b, other) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&other, "8")] {
        let o = tilescope(&["acquire", "--config", s(&cfg), "--out", s(out), "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert!(tree(&a) == tree(&b));
    assert!(tree(&a) != tree(&other));
}

#[test]
fn no_overlap_stitch_reassembles_the_oracle_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, cols, tw, th) = (3, 4, 24, 20);
    for t in 0..2 {
        let oracle = textured(cols * tw, rows * th, 40 + t as u64);
        for r in 0..rows {
            for c in 0..cols {
                let tile = oracle.crop(c * tw, r * th, tw, th).unwrap();
                save_tiff(&tile, dir.path().join(format!("cut_t{t:04}_z00_r{r:02}_c{c:02}_PC.tif"))).unwrap();
            }
        }
        save_tiff(&oracle, dir.path().join(format!("oracle{t}.tiff.bak"))).unwrap();
    }
    let o = tilescope(&["stitch", "--mode", "no-overlap", "--overlap", "0", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    for t in 0..2 {
        let oracle = load_tiff(dir.path().join(format!("oracle{t}.tiff.bak"))).unwrap();
        let pano = load_tiff(dir.path().join(format!("cut_t{t:04}_PC_stitched.tif"))).unwrap();
        assert_eq!(pano.dims(), oracle.dims());
        assert!(pano.pixels() == oracle.pixels(), "timestep {t} differs");
    }
    assert!(dir.path().join("cut_t0001_positions.txt").exists());
}

#[test]
fn unparseable_names_exit_2_listing_offenders() {
    let dir = tempfile::tempdir().unwrap();
    let tile = textured(16, 16, 1);
    save_tiff(&tile, dir.path().join("a_t0000_z00_r00_c00_PC.tif")).unwrap();
    save_tiff(&tile, dir.path().join("snapshot.tif")).unwrap();
    save_tiff(&tile, dir.path().join("a_t0000_r00_c01_PC.tif")).unwrap();
    for args in [
        vec!["stitch", "--mode", "no-overlap", "--overlap", "0"],
        vec!["flatten", "create"],
        vec!["stabilize", "--grid", "2x2"],
    ] {
        let mut args = args.clone();
        args.push(s(dir.path()));
        let o = tilescope(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        assert!(err.contains("snapshot.tif") && err.contains("a_t0000_r00_c01_PC.tif"), "{err}");
    }
}

#[test]
fn flatten_apply_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("reference");
    let sample = dir.path().join("sample");
    std::fs::create_dir_all(&reference).unwrap();
    std::fs::create_dir_all(&sample).unwrap();
    save_tiff(&textured(16, 16, 2), reference.join("ref_t0000_z00_r00_c00_PC.tif")).unwrap();
    save_tiff(&textured(32, 32, 3), sample.join("cells_t0000_z00_r00_c00_PC.tif")).unwrap();
    let o = tilescope(&["flatten", "create", s(&reference)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = tilescope(&["flatten", "apply", s(&sample), "--flat", s(&reference.join("resume"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dimensions"), "{}", stderr(&o));
}

#[test]
fn flatten_create_and_apply_remove_the_shading() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("reference");
    let sample = dir.path().join("sample");
    std::fs::create_dir_all(&reference).unwrap();
    std::fs::create_dir_all(&sample).unwrap();
    let (w, h) = (32, 24);
    let shade = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 - 15.5, y as f64 - 11.5);
        20000.0 - 20.0 * (dx * dx + dy * dy)
    };
    let bg = Image::from_fn(w, h, BitDepth::Sixteen, 1.0, Channel::PC, shade);
    for c in 0..3 {
        save_tiff(&bg, reference.join(format!("ref_t0000_z00_r00_c{c:02}_PC.tif"))).unwrap();
    }
    let specimen = |x: usize, y: usize| if (x / 4 + y / 4) % 2 == 0 { 3000.0 } else { 0.0 };
    let shaded = Image::from_fn(w, h, BitDepth::Sixteen, 1.0, Channel::PC, |x, y| shade(x, y) + specimen(x, y));
    save_tiff(&shaded, sample.join("cells_t0000_z00_r00_c00_PC.tif")).unwrap();

    let o = tilescope(&["flatten", "create", s(&reference), "--objective", "10X"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(reference.join("resume/flat_PC_10X.tif").exists());
    let o = tilescope(&["flatten", "apply", s(&sample), "--flat", s(&reference.join("resume"))]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = load_tiff(sample.join("flattened/cells_t0000_z00_r00_c00_PC.tif")).unwrap();
    let mean_bg = bg.pixels().iter().map(|&v| v as f64).sum::<f64>() / (w * h) as f64;
    for y in 0..h {
        for x in 0..w {
            let want = shaded.get(x, y) as f64 - bg.get(x, y) as f64 + mean_bg;
            assert!((out.get(x, y) as f64 - want).abs() <= 0.5, "({x}, {y}): {} vs {want}", out.get(x, y));
        }
    }
}

#[test]
fn stabilizing_identical_frames_leaves_them_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let frame = textured(96, 96, 9);
    for t in 0..2 {
        save_tiff(&frame, dir.path().join(format!("still_t{t:04}_PC_stitched.tif"))).unwrap();
    }
    let o = tilescope(&["stabilize", s(dir.path()), "--grid", "2x2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for t in 0..2 {
        let out = load_tiff(dir.path().join(format!("Stabilized/still_t{t:04}_stabilized.tif"))).unwrap();
        assert_eq!(out.dims(), frame.dims());
        assert!(out.pixels() == frame.pixels(), "timestep {t} changed");
    }
    let o = tilescope(&["stabilize", s(dir.path()), "--grid", "0x2"]);
    assert_eq!(o.status.code(), Some(2));
}

fn copy_tiles(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for f in files(from) {
        if parse_tile_file_name(&f).is_some() {
            std::fs::copy(from.join(&f), to.join(&f)).unwrap();
        }
    }
}

fn assert_same_files(a: &Path, b: &Path, pick: impl Fn(&str) -> bool) -> usize {
    let names: Vec<String> = files(a).into_iter().filter(|f| pick(f)).collect();
    assert!(!names.is_empty());
    for f in &names {
        assert!(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    names.len()
}

#[test]
fn manual_stages_reproduce_the_integrated_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(4, 100.0);
    c.params.channels.insert(Channel::BF, 20.0);
    c.params.execute_stabilization = true;
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("run");
    let o = tilescope(&["acquire", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let integrated = out.join("roi00");

    let manual = dir.path().join("manual");
    copy_tiles(&integrated, &manual);
    let o = tilescope(&["stitch", "--mode", "grid-pc", "--overlap", "0.2", "--config", s(&cfg), s(&manual)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n = assert_same_files(&integrated, &manual, |f| f.ends_with("_stitched.tif") || f.ends_with("_positions.txt"));
    assert_eq!(n, 4 * 2 + 4);

    // 100 um at a 51.2 um stride: 3 x 3 tiles
    let o = tilescope(&["stabilize", s(&manual), "--grid", "3x3", "--from-tiles", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n = assert_same_files(&integrated.join("Stabilized"), &manual.join("Stabilized"), |_| true);
    assert_eq!(n, 4 * 2);
}

#[test]
fn manual_flattening_reproduces_the_integrated_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(2, 40.0);
    c.simulator.camera.vignette_k = 0.3;
    c.flattening = FlatteningConfig {
        create: true,
        reference_level: 0.45,
    };
    c.params.apply_flattening = true;
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("run");
    let o = tilescope(&["acquire", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let manual = dir.path().join("manual");
    copy_tiles(&out.join("roi00"), &manual);
    let o = tilescope(&["flatten", "apply", s(&manual), "--flat", s(&out.join("resume")), "--exposure-ms", "33"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let flattened = manual.join("flattened");
    let o = tilescope(&["stitch", "--mode", "grid-pc", "--overlap", "0.2", "--config", s(&cfg), s(&flattened)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_same_files(&out.join("roi00"), &flattened, |f| f.ends_with("_stitched.tif"));
}
