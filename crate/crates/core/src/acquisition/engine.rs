use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::flatfield::{apply_flattening, create_flattening, FlatField, FlatFieldMeta};
use crate::imaging::{save_tiff, Channel, Image};
use crate::microscope::{AutofocusOutcome, HardwareError, Microscope, ObjectiveSpec, ScenePattern, VirtualMicroscope};
use crate::planner::{
    compute_tile_grid, fit_focus_plane, interpolate_z, is_autofocus_step, plan_route_from, schedule, z_stack,
    FocusPlane, FocusPoint, OverviewRegion, PlannerError, Roi, StagePoint, StitchMode, TilePlan, TravelMode,
};
use crate::stabilize::StabilizationReport;
use crate::stitch::{place_no_overlap, stitch, Panorama};

use super::layout::{OutputLayout, TileKey};
use super::log::{AcquisitionLog, LogKind};
use super::outputs::{stabilize_stitched, write_stitch_outputs, TileFileSource};
use super::{AcqEvent, AcquisitionError, AcquisitionObserver, AcquisitionSetup, Control};

const CORNER_NAMES: [&str; 4] = ["UL", "UR", "LR", "LL"];

/// What a time-lapse run did.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AcquisitionRecord {
    pub scheduled_timesteps: usize,
    pub completed: Vec<usize>,
    pub aborted: Vec<usize>,
    pub stopped: bool,
    pub tiles_captured: usize,
    pub total_tiles: usize,
    pub plane_fits: Vec<FocusPlane>,
    /// Per executed timestep: the `fitted_at` of the plane its tiles used.
    pub plane_used: BTreeMap<usize, Option<usize>>,
    pub fallbacks: usize,
    /// ROI id to the timesteps with stitched frames.
    pub stitched: BTreeMap<usize, Vec<usize>>,
    pub stabilization: BTreeMap<usize, StabilizationReport>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub plans: Vec<TilePlan>,
}

fn objective(scope: &impl Microscope, label: &str) -> Result<ObjectiveSpec, AcquisitionError> {
    scope
        .objective_by_label(label)
        .ok_or_else(|| AcquisitionError::Parameter(format!("no objective labelled {label:?} on the turret")))
}

/// Tile grids, routes and z stacks for every ROI, in ROI order. With
/// traveling-salesman travel each ROI's route starts where the previous one
/// ended (the first starts at the current stage position).
pub fn plan_tiles<M: Microscope>(scope: &M, setup: &AcquisitionSetup) -> Result<Vec<TilePlan>, AcquisitionError> {
    let p = &setup.params;
    let obj = objective(scope, &p.objective)?;
    let (w, h) = scope.sensor_size();
    let fov = (w as f64 * obj.pixel_ratio, h as f64 * obj.pixel_ratio);
    let stack = z_stack(p.z_min_um, p.z_max_um, p.z_step_um);
    let mut start = scope.state().stage_xy;
    let mut plans = Vec::with_capacity(setup.rois.len());
    for roi in &setup.rois {
        let mut plan = compute_tile_grid(roi, fov, p.overlap)?;
        if p.travel_mode == TravelMode::TravelingSalesman {
            plan.route = plan_route_from(start, &plan.centers)?;
        }
        if let Some(&last) = plan.route.last() {
            start = plan.centers[last];
        }
        plan.z_stack = stack.clone();
        plans.push(plan);
    }
    Ok(plans)
}

/// The low-magnification overview used to draw ROIs.
#[derive(Debug, Clone)]
pub struct OverviewImage {
    pub panorama: Panorama,
    /// Stage position of the panorama's pixel (0, 0) corner.
    pub origin: StagePoint,
    pub um_per_px: f64,
}

impl OverviewImage {
    pub fn pixel_to_stage(&self, px: f64, py: f64) -> StagePoint {
        StagePoint::new(self.origin.x + px * self.um_per_px, self.origin.y + py * self.um_per_px)
    }

    pub fn stage_to_pixel(&self, p: StagePoint) -> (f64, f64) {
        ((p.x - self.origin.x) / self.um_per_px, (p.y - self.origin.y) / self.um_per_px)
    }
}

fn snap_channel<M: Microscope>(scope: &mut M, ch: Channel) -> Result<Image, HardwareError> {
    scope.set_channel(ch)?;
    if ch == Channel::FL {
        scope.set_fl_shutter(true)?;
        let img = scope.snap_image();
        scope.set_fl_shutter(false)?;
        img
    } else {
        scope.snap_image()
    }
}

/// Tile the overview region side by side with `objective_label` and place
/// the tiles without overlap. Tiles that cannot be imaged are left black.
pub fn acquire_overview<M: Microscope>(
    scope: &mut M,
    overview: &OverviewRegion,
    objective_label: &str,
    channel: Channel,
    exposure_ms: f64,
    layout: Option<&OutputLayout>,
) -> Result<(OverviewImage, Vec<String>), AcquisitionError> {
    let obj = objective(scope, objective_label)?;
    scope.set_objective(obj.turret_position)?;
    scope.set_exposure(channel, exposure_ms)?;
    let (w, h) = scope.sensor_size();
    let fov = (w as f64 * obj.pixel_ratio, h as f64 * obj.pixel_ratio);
    let plan = compute_tile_grid(&Roi { id: 0, rect: overview.rect() }, fov, 0.0)?;
    let mut tiles = Vec::with_capacity(plan.len());
    let mut warnings = Vec::new();
    for (i, &c) in plan.centers.iter().enumerate() {
        let shot = scope.set_stage_xy(c).and_then(|_| snap_channel(scope, channel));
        match shot {
            Ok(img) => tiles.push(Some(img)),
            Err(e @ (HardwareError::SceneBounds { .. } | HardwareError::TravelLimit { .. })) => {
                let (r, col) = plan.row_col(i);
                warnings.push(format!("overview tile r{r} c{col} skipped: {e}"));
                tiles.push(None);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let refs: Vec<Option<&Image>> = tiles.iter().map(Option::as_ref).collect();
    let (panorama, _) = place_no_overlap(&refs, plan.rows, plan.cols)?;
    if let Some(layout) = layout {
        std::fs::create_dir_all(layout.overview_path(channel).parent().expect("has parent"))?;
        save_tiff(&panorama.image, layout.overview_path(channel))?;
    }
    let origin = StagePoint::new(overview.rect().x_min, overview.rect().y_min);
    Ok((
        OverviewImage {
            panorama,
            origin,
            um_per_px: obj.pixel_ratio,
        },
        warnings,
    ))
}

/// Image the reference sample at every planned tile position of every ROI
/// and average per channel. Fields are saved under `resume/`.
pub fn create_flattening_reference<M: Microscope>(
    scope: &mut M,
    setup: &AcquisitionSetup,
    layout: &OutputLayout,
) -> Result<BTreeMap<Channel, FlatField>, AcquisitionError> {
    let p = &setup.params;
    let obj = objective(scope, &p.objective)?;
    scope.set_objective(obj.turret_position)?;
    scope.set_illumination(p.illumination)?;
    scope.set_bit_depth(p.bit_depth)?;
    let plans = plan_tiles(scope, setup)?;
    let mut fields = BTreeMap::new();
    std::fs::create_dir_all(layout.resume_dir())?;
    for (&ch, &ms) in &p.channels {
        scope.set_exposure(ch, ms)?;
        let mut tiles = Vec::new();
        for plan in &plans {
            for &i in &plan.route {
                scope.set_stage_xy(plan.centers[i])?;
                tiles.push(snap_channel(scope, ch)?);
            }
        }
        let meta = FlatFieldMeta {
            objective: obj.label.clone(),
            exposure_ms: ms,
            illumination: p.illumination,
        };
        let ff = create_flattening(&tiles, meta)?;
        ff.save(&layout.resume_dir())?;
        fields.insert(ch, ff);
    }
    Ok(fields)
}

/// The flattening workflow on the simulator: put a uniform reference slide
/// of intensity `level` on the stage, image it as above, then put the
/// specimen back.
pub fn create_flattening_on_reference_slide(
    scope: &mut VirtualMicroscope,
    setup: &AcquisitionSetup,
    layout: &OutputLayout,
    level: f64,
) -> Result<BTreeMap<Channel, FlatField>, AcquisitionError> {
    let specimen = scope.config().scene.clone();
    let mut slide = specimen.clone();
    slide.pattern = ScenePattern::Uniform { level };
    slide.fiducials.clear();
    scope.swap_specimen(slide);
    let fields = create_flattening_reference(&mut *scope, setup, layout);
    scope.swap_specimen(specimen);
    fields
}

/// Load whichever of `channels` have a stored flat field for `objective`.
pub fn load_flat_fields(
    resume_dir: &Path,
    channels: impl IntoIterator<Item = Channel>,
    objective: &str,
) -> Result<BTreeMap<Channel, FlatField>, AcquisitionError> {
    let mut out = BTreeMap::new();
    for ch in channels {
        let path = resume_dir.join(format!("{}.tif", FlatField::file_stem(ch, objective)));
        if path.exists() {
            out.insert(ch, FlatField::load(&path)?);
        }
    }
    Ok(out)
}

struct Run<'a, M, O> {
    scope: M,
    observer: O,
    setup: &'a AcquisitionSetup,
    layout: OutputLayout,
    log: AcquisitionLog,
    record: AcquisitionRecord,
    imaging: ObjectiveSpec,
    af: ObjectiveSpec,
    plane: Option<FocusPlane>,
    /// Channels in stitching order: the registration channel first.
    channels: Vec<Channel>,
}

impl<M: Microscope, O: AcquisitionObserver> Run<'_, M, O> {
    fn now(&self) -> f64 {
        self.scope.state().sim_clock
    }

    fn log(&mut self, kind: LogKind, payload: impl Into<String>) -> Result<(), AcquisitionError> {
        let t = self.now();
        self.log.write(t, kind, payload)
    }

    fn emit(&mut self, event: AcqEvent) {
        let t = self.now();
        self.observer.on_event(t, &event);
    }

    fn warn(&mut self, message: String) -> Result<(), AcquisitionError> {
        tracing::warn!("{message}");
        self.log(LogKind::Warn, message.clone())?;
        self.record.warnings.push(message.clone());
        self.emit(AcqEvent::Warning { message });
        Ok(())
    }

    fn checkpoint(&mut self) -> Result<(), AcquisitionError> {
        match self.observer.checkpoint() {
            Control::Continue => Ok(()),
            Control::Stop => Err(AcquisitionError::Stopped),
        }
    }

    fn configure(&mut self) -> Result<(), AcquisitionError> {
        let p = &self.setup.params;
        self.scope.set_stage_speed(p.stage_speed_um_s)?;
        self.scope.set_bit_depth(p.bit_depth)?;
        self.scope.set_illumination(p.illumination)?;
        for (&ch, &ms) in &p.channels {
            self.scope.set_exposure(ch, ms)?;
        }
        self.scope.set_objective(self.imaging.turret_position)?;
        Ok(())
    }

    fn refocus(&mut self, t: usize) -> Result<(), AcquisitionError> {
        self.scope.set_objective(self.af.turret_position)?;
        let mut points = Vec::new();
        let mut report = String::new();
        for (name, corner) in CORNER_NAMES.iter().zip(self.setup.overview.rect().corners()) {
            self.checkpoint()?;
            self.scope.set_stage_xy(corner)?;
            match self.scope.autofocus()? {
                AutofocusOutcome::Measured(z) => {
                    self.log(LogKind::AfOk, format!("t={t} corner={name} x={:.3} y={:.3} z={z:.4}", corner.x, corner.y))?;
                    let _ = writeln!(report, "corner_{name}: {:.3} {:.3} {z:.6}", corner.x, corner.y);
                    points.push(FocusPoint {
                        x: corner.x,
                        y: corner.y,
                        z,
                    });
                    self.emit(AcqEvent::AutofocusResult {
                        timestep: t,
                        x: corner.x,
                        y: corner.y,
                        z: Some(z),
                    });
                }
                AutofocusOutcome::Failed => {
                    self.log(LogKind::AfFail, format!("t={t} corner={name} x={:.3} y={:.3}", corner.x, corner.y))?;
                    let _ = writeln!(report, "corner_{name}: {:.3} {:.3} failed", corner.x, corner.y);
                    self.emit(AcqEvent::AutofocusResult {
                        timestep: t,
                        x: corner.x,
                        y: corner.y,
                        z: None,
                    });
                }
            }
        }
        self.scope.set_objective(self.imaging.turret_position)?;

        let fit = if points.len() >= 3 {
            fit_focus_plane(&points, t)
        } else {
            Err(PlannerError::DegenerateFit(format!("{} of 4 corner measurements succeeded", points.len())))
        };
        match fit {
            Ok(plane) => {
                self.log(
                    LogKind::PlaneFit,
                    format!("t={t} a={:.9} b={:.9} c={:.6} n={}", plane.a, plane.b, plane.c, plane.n_points),
                )?;
                let _ = write!(
                    report,
                    "timestep: {t}\na: {:.12}\nb: {:.12}\nc: {:.9}\nn_points: {}\nresiduals: {}\n",
                    plane.a,
                    plane.b,
                    plane.c,
                    plane.n_points,
                    plane.residuals.iter().map(|r| format!("{r:.6}")).collect::<Vec<_>>().join(" ")
                );
                std::fs::write(self.layout.zflattening_path(t), report)?;
                self.emit(AcqEvent::PlaneRefit {
                    timestep: t,
                    a: plane.a,
                    b: plane.b,
                    c: plane.c,
                    n_points: plane.n_points,
                });
                self.record.plane_fits.push(plane.clone());
                self.plane = Some(plane);
            }
            Err(e) => {
                let reused = self.plane.as_ref().map(|p| p.fitted_at);
                let msg = match reused {
                    Some(from) => format!("t={t} {e}; reusing plane fitted at t={from}"),
                    None => format!("t={t} {e}; no earlier plane, holding the current z"),
                };
                self.log(LogKind::PlaneFallback, msg)?;
                self.record.fallbacks += 1;
                self.emit(AcqEvent::PlaneFallback {
                    timestep: t,
                    reused_from: reused,
                });
            }
        }
        Ok(())
    }

    /// One timestep across all ROIs; each ROI is stitched from its focal
    /// z slice as soon as its tiles are in.
    fn acquire_step(&mut self, t: usize) -> Result<(), AcquisitionError> {
        if is_autofocus_step(t, self.setup.params.af_update_every) {
            self.refocus(t)?;
        }
        let plane = match &self.plane {
            Some(p) => p.clone(),
            None => FocusPlane::flat(self.scope.state().z, t),
        };
        self.record.plane_used.insert(t, self.plane.as_ref().map(|p| p.fitted_at));
        let name = self.setup.params.name.clone();
        for plan in self.record.plans.clone() {
            let focal = plan.z_stack.len() / 2;
            let mut slices: BTreeMap<Channel, Vec<Option<Image>>> =
                self.channels.iter().map(|&c| (c, vec![None; plan.len()])).collect();
            for &i in &plan.route {
                self.checkpoint()?;
                let (row, col) = plan.row_col(i);
                let c = plan.centers[i];
                let travel = self.scope.set_stage_xy(c)?;
                self.log(
                    LogKind::Move,
                    format!("roi={} r={row} c={col} x={:.3} y={:.3} travel_s={travel:.3}", plan.roi_id, c.x, c.y),
                )?;
                let base = interpolate_z(&plane, c);
                for (zi, off) in plan.z_stack.iter().enumerate() {
                    self.scope.set_z(base + off)?;
                    for ch in self.channels.clone() {
                        self.checkpoint()?;
                        let img = snap_channel(&mut self.scope, ch)?;
                        let key = TileKey {
                            timestep: t,
                            z_index: zi,
                            row,
                            col,
                            channel: ch,
                        };
                        let path = self.layout.tile_path(plan.roi_id, &name, &key);
                        save_tiff(&img, &path)?;
                        self.log(
                            LogKind::Snap,
                            format!(
                                "roi={} r={row} c={col} z={zi} ch={ch} z_um={:.4} file={}",
                                plan.roi_id,
                                base + off,
                                path.file_name().and_then(|f| f.to_str()).unwrap_or_default()
                            ),
                        )?;
                        self.record.tiles_captured += 1;
                        self.emit(AcqEvent::TileCaptured {
                            roi: plan.roi_id,
                            timestep: t,
                            row,
                            col,
                            z_index: zi,
                            channel: ch,
                            path: path.display().to_string(),
                            tiles_done: self.record.tiles_captured,
                            total: self.record.total_tiles,
                        });
                        if zi == focal {
                            let img = match self.flat_for(ch) {
                                Some(ff) => apply_flattening(&img, ff)?,
                                None => img,
                            };
                            slices.get_mut(&ch).expect("channel slot")[i] = Some(img);
                        }
                    }
                }
            }
            self.stitch_roi(t, &plan, &slices)?;
        }
        Ok(())
    }

    fn flat_for(&self, ch: Channel) -> Option<&FlatField> {
        if self.setup.params.apply_flattening {
            self.setup.flat_fields.get(&ch)
        } else {
            None
        }
    }

    fn stitch_roi(
        &mut self,
        t: usize,
        plan: &TilePlan,
        slices: &BTreeMap<Channel, Vec<Option<Image>>>,
    ) -> Result<(), AcquisitionError> {
        let p = &self.setup.params;
        let out = stitch(slices, plan.rows, plan.cols, p.stitch_mode, p.overlap, &p.stitching)?;
        for w in out.warnings.clone() {
            self.warn(format!("roi={} t={t}: {w}", plan.roi_id))?;
        }
        let name = self.setup.params.name.clone();
        let written = write_stitch_outputs(&self.layout.roi_dir(plan.roi_id), &name, t, plan.rows, plan.cols, &out)?;
        for (ch, path) in written {
            self.emit(AcqEvent::PanoramaReady {
                roi: plan.roi_id,
                timestep: t,
                channel: ch,
                path: path.display().to_string(),
            });
        }
        self.record.stitched.entry(plan.roi_id).or_default().push(t);
        Ok(())
    }

    fn stabilize(&mut self) -> Result<(), AcquisitionError> {
        let p = self.setup.params.clone();
        let primary = self.channels[0];
        for plan in self.record.plans.clone() {
            let steps = self.record.stitched.get(&plan.roi_id).cloned().unwrap_or_default();
            if steps.len() < 2 {
                self.warn(format!("roi={}: fewer than 2 stitched frames, stabilization skipped", plan.roi_id))?;
                continue;
            }
            let flat = if p.stabilization.use_flattened_tiles {
                self.flat_for(primary).cloned()
            } else {
                None
            };
            let source = TileFileSource {
                dir: self.layout.roi_dir(plan.roi_id),
                name: p.name.clone(),
                rows: plan.rows,
                cols: plan.cols,
                channel: primary,
                z_index: plan.z_stack.len() / 2,
                timesteps: steps.clone(),
                flat,
            };
            let done = stabilize_stitched(
                &self.layout.roi_dir(plan.roi_id),
                &p.name,
                &steps,
                &self.channels,
                primary,
                &source,
                &p.stabilization,
            )?;
            for w in done.report.warnings.clone() {
                self.warn(format!("roi={} stabilization: {w}", plan.roi_id))?;
            }
            self.emit(AcqEvent::StabilizationDone {
                roi: plan.roi_id,
                frames: steps.len(),
                group: done.report.group.as_ref().map(|g| g.tiles.clone()),
                fallback: done.report.fallback,
            });
            self.record.stabilization.insert(plan.roi_id, done.report);
        }
        Ok(())
    }
}

/// Run the time-lapse: per timestep, refresh the focus plane when due, visit
/// every ROI's tiles in route order snapping each channel (and z slice),
/// then stitch. Hardware errors abort only the current timestep. When
/// stabilization is enabled it runs over each ROI's stitched sequence after
/// the loop.
pub fn run_timelapse<M: Microscope, O: AcquisitionObserver>(
    scope: M,
    setup: &AcquisitionSetup,
    out_dir: &Path,
    observer: O,
) -> Result<AcquisitionRecord, AcquisitionError> {
    let mut setup = setup.clone();
    let normalize_warnings = setup.params.normalize();
    let errs = setup.field_errors();
    if !errs.is_empty() {
        return Err(AcquisitionError::Invalid(errs));
    }
    let layout = OutputLayout::new(out_dir);
    layout.create()?;
    let log = AcquisitionLog::create(&layout.log_path())?;
    let imaging = objective(&scope, &setup.params.objective)?;
    let af = scope
        .autofocus_objective()
        .ok_or_else(|| AcquisitionError::Parameter("no objectives on the turret".into()))?;
    let mut channels: Vec<Channel> = setup.params.channels.keys().copied().collect();
    if let Some(reg) = setup.params.stitch_mode.registration_channel() {
        channels.retain(|&c| c != reg);
        channels.insert(0, reg);
    }
    let mut run = Run {
        scope,
        observer,
        setup: &setup,
        layout,
        log,
        record: AcquisitionRecord::default(),
        imaging,
        af,
        plane: None,
        channels,
    };
    for w in normalize_warnings {
        run.warn(w)?;
    }
    run.configure()?;
    run.record.plans = plan_tiles(&run.scope, run.setup)?;
    for plan in &run.record.plans {
        std::fs::create_dir_all(run.layout.roi_dir(plan.roi_id))?;
    }
    let times = schedule(&run.setup.params);
    let per_step: usize = run
        .record
        .plans
        .iter()
        .map(|p| p.len() * p.z_stack.len() * run.channels.len())
        .sum();
    run.record.scheduled_timesteps = times.len();
    run.record.total_tiles = per_step * times.len();

    if run.setup.params.apply_flattening {
        let p = &run.setup.params;
        let mut notes = Vec::new();
        for (&ch, &ms) in &p.channels {
            match run.setup.flat_fields.get(&ch) {
                Some(ff) => notes.extend(ff.compatibility_warnings(ch, &run.imaging.label, ms)),
                None => notes.push(format!("no flat field for {ch}; its tiles are used uncorrected")),
            }
        }
        for n in notes {
            run.warn(n)?;
        }
    }
    if run.setup.params.stitch_mode == StitchMode::NoOverlap && run.setup.params.overlap > 0.0 {
        let o = run.setup.params.overlap;
        run.warn(format!("no-overlap stitching of tiles planned with {o} overlap duplicates the shared strips"))?;
    }

    let t0 = run.now();
    for (t, &ts) in times.iter().enumerate() {
        if run.checkpoint().is_err() {
            run.record.stopped = true;
            break;
        }
        run.scope.wait_until(t0 + ts);
        match run.acquire_step(t) {
            Ok(()) => {
                run.record.completed.push(t);
                run.log(LogKind::StepDone, format!("t={t}"))?;
                run.emit(AcqEvent::TimestepDone {
                    timestep: t,
                    aborted: false,
                });
            }
            Err(AcquisitionError::Stopped) => {
                let _ = run.scope.set_fl_shutter(false);
                run.log(LogKind::Warn, format!("t={t} stopped by request"))?;
                run.record.stopped = true;
                break;
            }
            Err(e) => {
                let _ = run.scope.set_fl_shutter(false);
                let message = format!("t={t} aborted: {e}");
                tracing::error!("{message}");
                run.log(LogKind::Error, message.clone())?;
                run.record.aborted.push(t);
                run.emit(AcqEvent::Error { message });
                run.emit(AcqEvent::TimestepDone {
                    timestep: t,
                    aborted: true,
                });
            }
        }
        run.log.flush()?;
    }

    if run.setup.params.execute_stabilization && !run.record.stopped {
        if let Err(e) = run.stabilize() {
            let message = format!("stabilization failed: {e}");
            run.log(LogKind::Error, message.clone())?;
            run.emit(AcqEvent::Error { message });
        }
    }
    run.log.flush()?;
    Ok(run.record)
}
