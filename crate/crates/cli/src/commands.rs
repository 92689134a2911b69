use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use tilescope::acquisition::{
    stabilize_stitched, write_stitch_outputs, AcqEvent, AcquisitionError, AcquisitionObserver, FrameGridSource,
    TileFileSource,
};
use tilescope::config::SystemConfig;
use tilescope::flatfield::{apply_flattening, create_flattening_smoothed, FlatField, FlatFieldMeta};
use tilescope::imaging::{load_tiff, save_tiff, Channel, Image};
use tilescope::planner::{FieldError, StitchMode};
use tilescope::stabilize::StabilizerConfig;
use tilescope::stitch::stitch as stitch_tiles;
use tilescope::workflow::run_workflow;

use crate::scan::{scan_dir, DirScan, TileGeometry};

#[derive(Debug)]
pub enum CliError {
    /// Bad input: configuration, flags or file names. Exit status 2.
    Usage(String),
    /// The work itself failed. Exit status 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn field_list(errs: &[FieldError]) -> String {
    let mut s = String::from("invalid configuration:");
    for e in errs {
        s.push_str(&format!("\n  {}: {}", e.field, e.message));
    }
    s
}

fn load_config(path: Option<&Path>) -> Result<Option<SystemConfig>, CliError> {
    path.map(|p| SystemConfig::load(p).map_err(usage)).transpose()
}

/// Prints warnings and errors as the run reports them.
struct StderrObserver;

impl AcquisitionObserver for StderrObserver {
    fn on_event(&mut self, sim_time: f64, event: &AcqEvent) {
        match event {
            AcqEvent::Warning { message } => eprintln!("warning [{sim_time:.1} s]: {message}"),
            AcqEvent::Error { message } => eprintln!("error [{sim_time:.1} s]: {message}"),
            _ => {}
        }
    }
}

pub fn acquire(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = SystemConfig::load(config).map_err(usage)?;
    if let Some(seed) = seed {
        cfg.simulator.seed = seed;
    }
    let errs = cfg.field_errors();
    if !errs.is_empty() {
        return Err(CliError::Usage(field_list(&errs)));
    }
    let out = out.unwrap_or_else(|| cfg.data_root.join(&cfg.params.name));
    match run_workflow(&cfg, &out, StderrObserver) {
        Ok(done) => {
            let frames: usize = done.record.stitched.values().map(Vec::len).sum();
            println!(
                "{} of {} timesteps completed, {} tiles, {} stitched frames in {}",
                done.record.completed.len(),
                done.record.scheduled_timesteps,
                done.record.tiles_captured,
                frames,
                out.display()
            );
            if done.record.aborted.is_empty() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("timesteps {:?} were aborted", done.record.aborted)))
            }
        }
        Err(AcquisitionError::Invalid(errs)) => Err(CliError::Usage(field_list(&errs))),
        Err(e) => Err(runtime(e)),
    }
}

fn scan(dir: &Path) -> Result<DirScan, CliError> {
    let scan = scan_dir(dir).map_err(|e| usage(format!("reading {}: {e}", dir.display())))?;
    if !scan.offenders.is_empty() {
        return Err(CliError::Usage(format!(
            "unparseable file names in {}:\n  {}",
            dir.display(),
            scan.offenders.join("\n  ")
        )));
    }
    Ok(scan)
}

pub struct StitchJob {
    pub mode: StitchMode,
    pub overlap: f64,
    pub dir: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub max_search_px: Option<usize>,
}

pub fn stitch(job: &StitchJob) -> Result<(), CliError> {
    if !(job.overlap.is_finite() && (0.0..1.0).contains(&job.overlap)) {
        return Err(usage("--overlap must lie in [0, 1)"));
    }
    if job.mode != StitchMode::NoOverlap && job.overlap <= 0.0 {
        return Err(usage("grid stitching needs a positive --overlap"));
    }
    let mut settings = load_config(job.config.as_deref())?
        .map(|c| c.params.stitching)
        .unwrap_or_default();
    if let Some(px) = job.max_search_px {
        settings.max_search_px = px;
    }
    settings.validate().map_err(usage)?;
    let scan = scan(&job.dir)?;
    if scan.tiles.is_empty() {
        return Err(usage(format!("no tiles in {}", job.dir.display())));
    }
    let mut written = 0;
    for (name, tiles) in &scan.tiles {
        let geo = TileGeometry::of(tiles);
        if let Some(reg) = job.mode.registration_channel() {
            if !geo.channels.contains(&reg) {
                return Err(usage(format!("{name}: {:?} registers on {reg}, which has no tiles", job.mode)));
            }
        }
        let focal = geo.focal_slice();
        for &t in &geo.timesteps {
            let mut slots: BTreeMap<Channel, Vec<Option<Image>>> =
                geo.channels.iter().map(|&c| (c, vec![None; geo.rows * geo.cols])).collect();
            for (key, path) in tiles.iter().filter(|(k, _)| k.timestep == t && k.z_index == focal) {
                let img = load_tiff(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
                slots.get_mut(&key.channel).expect("channel slot")[key.row * geo.cols + key.col] = Some(img);
            }
            let out = stitch_tiles(&slots, geo.rows, geo.cols, job.mode, job.overlap, &settings).map_err(runtime)?;
            for w in &out.warnings {
                eprintln!("warning: {name} t={t}: {w}");
            }
            written += write_stitch_outputs(&job.out, name, t, geo.rows, geo.cols, &out)
                .map_err(runtime)?
                .len();
        }
    }
    println!("{written} panoramas written to {}", job.out.display());
    Ok(())
}

pub struct FlattenCreateJob {
    pub dir: PathBuf,
    pub out: PathBuf,
    pub objective: String,
    pub exposure_ms: f64,
    pub illumination: f64,
    pub sigma: f64,
}

pub fn flatten_create(job: &FlattenCreateJob) -> Result<(), CliError> {
    if !(job.sigma.is_finite() && job.sigma >= 0.0) {
        return Err(usage("--sigma must be 0 or positive"));
    }
    let scan = scan(&job.dir)?;
    let mut by_channel: BTreeMap<Channel, Vec<&PathBuf>> = BTreeMap::new();
    for tiles in scan.tiles.values() {
        for (key, path) in tiles {
            by_channel.entry(key.channel).or_default().push(path);
        }
    }
    if by_channel.is_empty() {
        return Err(usage(format!("no tiles in {}", job.dir.display())));
    }
    for (ch, paths) in by_channel {
        let tiles = paths
            .iter()
            .map(|p| load_tiff(p).map_err(|e| runtime(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        let meta = FlatFieldMeta {
            objective: job.objective.clone(),
            exposure_ms: job.exposure_ms,
            illumination: job.illumination,
        };
        let ff = create_flattening_smoothed(&tiles, meta, job.sigma).map_err(usage)?;
        let path = ff.save(&job.out).map_err(runtime)?;
        println!("{ch}: {} tiles averaged into {}", tiles.len(), path.display());
    }
    Ok(())
}

pub struct FlattenApplyJob {
    pub dir: PathBuf,
    pub flat: PathBuf,
    pub objective: Option<String>,
    pub exposure_ms: Option<f64>,
}

/// Subdirectory receiving corrected tiles.
pub const FLATTENED_DIR: &str = "flattened";

fn find_flat(dir: &Path, ch: Channel, objective: Option<&str>) -> Result<Option<FlatField>, CliError> {
    let path = match objective {
        Some(obj) => {
            let p = dir.join(format!("{}.tif", FlatField::file_stem(ch, obj)));
            if !p.exists() {
                return Ok(None);
            }
            p
        }
        None => {
            let prefix = format!("flat_{ch}_");
            let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| usage(format!("reading {}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let f = p.file_name().and_then(|f| f.to_str()).unwrap_or_default();
                    f.starts_with(&prefix) && f.ends_with(".tif")
                })
                .collect();
            found.sort();
            match found.len() {
                0 => return Ok(None),
                1 => found.remove(0),
                _ => {
                    return Err(usage(format!(
                        "several {ch} flat fields in {}; choose one with --objective",
                        dir.display()
                    )))
                }
            }
        }
    };
    FlatField::load(&path).map(Some).map_err(usage)
}

pub fn flatten_apply(job: &FlattenApplyJob) -> Result<(), CliError> {
    let scan = scan(&job.dir)?;
    if scan.tiles.is_empty() {
        return Err(usage(format!("no tiles in {}", job.dir.display())));
    }
    let channels: Vec<Channel> = {
        let mut c: Vec<Channel> = scan.tiles.values().flat_map(|t| t.keys().map(|k| k.channel)).collect();
        c.sort();
        c.dedup();
        c
    };
    let mut flats = BTreeMap::new();
    for ch in channels {
        match find_flat(&job.flat, ch, job.objective.as_deref())? {
            Some(ff) => {
                if let Some(ms) = job.exposure_ms {
                    for w in ff.compatibility_warnings(ch, &ff.meta.objective, ms) {
                        eprintln!("warning: {w}");
                    }
                }
                flats.insert(ch, ff);
            }
            None => eprintln!("warning: no {ch} flat field in {}; its tiles are copied uncorrected", job.flat.display()),
        }
    }
    let out_dir = job.dir.join(FLATTENED_DIR);
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    let mut mismatched = Vec::new();
    let mut written = 0;
    for tiles in scan.tiles.values() {
        for (key, path) in tiles {
            let img = load_tiff(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let corrected = match flats.get(&key.channel) {
                Some(ff) if ff.dims() != img.dims() => {
                    let (fw, fh) = ff.dims();
                    mismatched.push(format!(
                        "{} is {}x{}, the {} flat field {fw}x{fh}",
                        path.file_name().and_then(|f| f.to_str()).unwrap_or_default(),
                        img.width(),
                        img.height(),
                        key.channel
                    ));
                    continue;
                }
                Some(ff) => apply_flattening(&img, ff).map_err(runtime)?,
                None => img,
            };
            let file = path.file_name().expect("scanned files have names");
            save_tiff(&corrected, out_dir.join(file)).map_err(runtime)?;
            written += 1;
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError::Usage(format!(
            "tile and flat-field dimensions differ:\n  {}",
            mismatched.join("\n  ")
        )));
    }
    println!("{written} tiles written to {}", out_dir.display());
    Ok(())
}

pub struct StabilizeJob {
    pub dir: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub from_tiles: bool,
    pub name: Option<String>,
    pub primary: Option<Channel>,
    pub config: Option<PathBuf>,
}

/// The engine's primary channel: the registration channel, else the first
/// enabled one.
fn configured_primary(cfg: &SystemConfig) -> Option<Channel> {
    let mut params = cfg.params.clone();
    params.normalize();
    params
        .stitch_mode
        .registration_channel()
        .or_else(|| params.channels.keys().next().copied())
}

pub fn stabilize(job: &StabilizeJob) -> Result<(), CliError> {
    let cfg = load_config(job.config.as_deref())?;
    let settings: StabilizerConfig = cfg.as_ref().map(|c| c.params.stabilization.clone()).unwrap_or_default();
    settings.validate().map_err(usage)?;
    let scan = scan(&job.dir)?;
    let name = match &job.name {
        Some(n) => n.clone(),
        None => {
            let mut names = scan.stitched.keys();
            match (names.next(), names.next()) {
                (Some(n), None) => n.clone(),
                (None, _) => return Err(usage(format!("no stitched frames in {}", job.dir.display()))),
                _ => return Err(usage("several acquisitions in the directory; choose one with --name")),
            }
        }
    };
    let frames = scan
        .stitched
        .get(&name)
        .ok_or_else(|| usage(format!("no stitched frames named {name:?}")))?;
    let mut channels: Vec<Channel> = frames.keys().map(|&(_, c)| c).collect();
    channels.sort();
    channels.dedup();
    let primary = job
        .primary
        .or_else(|| cfg.as_ref().and_then(configured_primary).filter(|c| channels.contains(c)))
        .or_else(|| channels.first().copied())
        .expect("at least one frame");
    let timesteps: Vec<usize> = frames.keys().filter(|&&(_, c)| c == primary).map(|&(t, _)| t).collect();
    if timesteps.len() < 2 {
        return Err(usage(format!("{primary} has {} stitched frames; at least 2 are needed", timesteps.len())));
    }
    // primary first, then every other channel with a complete sequence
    let mut ordered = vec![primary];
    for &ch in &channels {
        if ch == primary {
            continue;
        }
        if timesteps.iter().all(|t| frames.contains_key(&(*t, ch))) {
            ordered.push(ch);
        } else {
            eprintln!("warning: {ch} lacks frames for some timesteps and is not stabilized");
        }
    }

    let done = if job.from_tiles {
        let tiles = scan
            .tiles
            .get(&name)
            .ok_or_else(|| usage(format!("--from-tiles: no {name} tiles in {}", job.dir.display())))?;
        let geo = TileGeometry::of(tiles);
        if (geo.rows, geo.cols) != (job.rows, job.cols) {
            return Err(usage(format!(
                "--grid {}x{} does not match the {}x{} tile grid",
                job.rows, job.cols, geo.rows, geo.cols
            )));
        }
        let source = TileFileSource {
            dir: job.dir.clone(),
            name: name.clone(),
            rows: geo.rows,
            cols: geo.cols,
            channel: primary,
            z_index: geo.focal_slice(),
            timesteps: timesteps.clone(),
            flat: None,
        };
        stabilize_stitched(&job.dir, &name, &timesteps, &ordered, primary, &source, &settings)
    } else {
        let paths: Vec<PathBuf> = timesteps.iter().map(|t| frames[&(*t, primary)].clone()).collect();
        let source = FrameGridSource::new(paths, job.rows, job.cols).map_err(usage)?;
        stabilize_stitched(&job.dir, &name, &timesteps, &ordered, primary, &source, &settings)
    }
    .map_err(runtime)?;

    for w in &done.report.warnings {
        eprintln!("warning: {w}");
    }
    let group = match &done.report.group {
        Some(g) => format!("correlated group {:?}", g.tiles),
        None => "no correlated group, all tiles averaged".to_string(),
    };
    println!(
        "{} frames stabilized ({group}); written to {}",
        done.written.len(),
        job.dir.join(tilescope::acquisition::layout::STABILIZED_DIR).display()
    );
    Ok(())
}
