use std::collections::VecDeque;
use std::convert::Infallible;
use std::path::PathBuf;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tilescope::acquisition::{
    acquire_overview, create_flattening_on_reference_slide, layout, load_flat_fields, plan_tiles, run_timelapse,
    AcquisitionSetup, OutputLayout,
};
use tilescope::imaging::tiff::encode_tiff;
use tilescope::imaging::{load_tiff, Channel, Image};
use tilescope::microscope::Microscope;
use tilescope::planner::{schedule, FieldError, OverviewRegion, Roi, StagePoint, StageRect};
use tokio::sync::watch;

use crate::render::{render_png, Window};
use crate::run::SessionObserver;
use crate::session::{FrameKey, Phase, PixelRect, RoiEntry, RunInfo, Session, Snapshot};
use crate::AppState;

/// File under the data root holding the corners (and ROIs) kept for
/// "use retained".
pub const RETAINED_FILE: &str = "retained_overview.json";

/// Longest a long-poll request waits for new events.
const MAX_POLL_MS: u64 = 30_000;

#[derive(Debug)]
pub enum ApiError {
    /// The action is not valid in the current phase.
    Phase(Phase),
    Invalid(Vec<FieldError>),
    Unprocessable(String),
    NotFound(String),
    Internal(String),
}

impl ApiError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ApiError::Invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Phase(p) => (StatusCode::CONFLICT, json!({ "error": format!("phase={p}"), "phase": p })),
            ApiError::Invalid(errors) => (StatusCode::UNPROCESSABLE_ENTITY, json!({ "errors": errors })),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": m })),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn routes(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/params", put(put_params))
        .route("/overview/corner", post(overview_corner))
        .route("/overview/store", post(overview_store))
        .route("/overview/use-retained", post(overview_use_retained))
        .route("/overview/acquire", post(overview_acquire))
        .route("/overview/image", get(overview_image))
        .route("/rois", post(set_rois))
        .route("/stage/move", post(stage_move))
        .route("/z/move", post(z_move))
        .route("/focus/register", post(focus_register))
        .route("/contrast", post(set_contrast))
        .route("/acquisition/start", post(acquisition_start))
        .route("/acquisition/pause", post(acquisition_pause))
        .route("/acquisition/resume", post(acquisition_resume))
        .route("/acquisition/stop", post(acquisition_stop))
        .route("/flattening/create", post(flattening_create))
        .route("/flattening/apply-toggle", post(flattening_apply_toggle))
        .route("/events", get(get_events))
        .route("/frames/{roi}/{t}/{channel}", get(get_frame))
        .with_state(state)
}

/// Parse a JSON body; an empty body reads as `{}`.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let bytes: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(bytes).map_err(|e| ApiError::Unprocessable(format!("malformed body: {e}")))
}

fn require(s: &Session, allowed: impl Fn(Phase) -> bool) -> ApiResult<()> {
    if allowed(s.phase) {
        Ok(())
    } else {
        Err(ApiError::Phase(s.phase))
    }
}

fn not_busy(p: Phase) -> bool {
    !p.is_busy()
}

/// Snapshot taken under the session lock, so its phase is the phase after
/// its `last_seq`.
fn snapshot(st: &AppState, s: &Session) -> Snapshot {
    let hw = st.scope.state();
    s.snapshot(hw.stage_xy, hw.z)
}

fn sync_clock(st: &AppState, s: &mut Session) {
    s.sim_time = s.sim_time.max(st.scope.state().sim_clock);
}

async fn get_state(State(st): State<AppState>) -> Json<Snapshot> {
    let s = st.session.lock();
    Json(snapshot(&st, &s))
}

async fn put_params(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Snapshot>> {
    let mut params: tilescope::planner::AcquisitionParams = parse(&body)?;
    let mut s = st.session.lock();
    require(&s, not_busy)?;
    let warnings = params.normalize();
    let mut errs = params.field_errors();
    if !st.config.simulator.objectives.iter().any(|o| o.label == params.objective) {
        errs.push(FieldError {
            field: "objective".into(),
            message: format!("no objective labelled {:?}", params.objective),
        });
    }
    if !errs.is_empty() {
        return Err(ApiError::Invalid(errs));
    }
    s.params = params;
    let before = s.phase;
    s.commit(before, "params", json!({ "warnings": warnings }));
    Ok(Json(snapshot(&st, &s)))
}

#[derive(Deserialize)]
struct CornerBody {
    which: Corner,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
enum Corner {
    UL,
    LR,
}

async fn overview_corner(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Snapshot>> {
    let req: CornerBody = parse(&body)?;
    let mut s = st.session.lock();
    require(&s, not_busy)?;
    let here = st.scope.state().stage_xy;
    match req.which {
        Corner::UL => s.upper_left = Some(here),
        Corner::LR => s.lower_right = Some(here),
    }
    s.overview = match (s.upper_left, s.lower_right) {
        (Some(ul), Some(lr)) => OverviewRegion::new(ul, lr).ok(),
        _ => None,
    };
    s.clear_overview_products();
    s.transition(Phase::OverviewSetup, "overview_corner", json!({ "which": req.which, "x": here.x, "y": here.y }));
    Ok(Json(snapshot(&st, &s)))
}

#[derive(Debug, Serialize, Deserialize)]
struct Retained {
    overview: OverviewRegion,
    #[serde(default)]
    rois: Vec<StageRect>,
}

fn corners_region(s: &Session) -> ApiResult<OverviewRegion> {
    match (s.upper_left, s.lower_right) {
        (Some(ul), Some(lr)) => OverviewRegion::new(ul, lr).map_err(|e| ApiError::field("overview", e.to_string())),
        _ => Err(ApiError::field("overview", "register both the UL and LR corners first")),
    }
}

async fn overview_store(State(st): State<AppState>) -> ApiResult<Json<Snapshot>> {
    let mut s = st.session.lock();
    require(&s, |p| matches!(p, Phase::OverviewSetup | Phase::RoiSelection | Phase::FocusSetup | Phase::Done))?;
    let region = corners_region(&s)?;
    let retained = Retained {
        overview: region,
        rois: s.rois.iter().map(|r| r.stage).collect(),
    };
    let path = st.config.data_root.join(RETAINED_FILE);
    std::fs::create_dir_all(&st.config.data_root)
        .and_then(|()| std::fs::write(&path, serde_json::to_vec_pretty(&retained).expect("plain data")))
        .map_err(|e| ApiError::Internal(format!("writing {}: {e}", path.display())))?;
    s.overview = Some(region);
    let before = s.phase;
    s.commit(before, "overview_store", json!({ "path": path, "rois": retained.rois.len() }));
    Ok(Json(snapshot(&st, &s)))
}

/// Stage origin and scale of the overview panorama. Before the overview is
/// imaged they follow from the region and the overview objective.
fn overview_frame(st: &AppState, s: &Session) -> Option<(StagePoint, f64)> {
    if let Some((img, _)) = &s.overview_image {
        return Some((img.origin, img.um_per_px));
    }
    let region = s.overview?;
    let label = st.config.overview_objective_label()?;
    let obj = st.config.simulator.objectives.iter().find(|o| o.label == label)?;
    Some((region.upper_left, obj.pixel_ratio))
}

fn stage_to_pixel_rect(origin: StagePoint, um_per_px: f64, r: &StageRect) -> PixelRect {
    PixelRect {
        x: (r.x_min - origin.x) / um_per_px,
        y: (r.y_min - origin.y) / um_per_px,
        width: r.width() / um_per_px,
        height: r.height() / um_per_px,
    }
}

async fn overview_use_retained(State(st): State<AppState>) -> ApiResult<Json<Snapshot>> {
    let path = st.config.data_root.join(RETAINED_FILE);
    let retained = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice::<Retained>(&bytes)
            .map_err(|e| ApiError::Internal(format!("reading {}: {e}", path.display())))?,
        Err(_) => match st.config.overview {
            Some(overview) => Retained {
                overview,
                rois: st.config.rois.clone(),
            },
            None => return Err(ApiError::field("overview", "no retained overview corners")),
        },
    };
    let mut s = st.session.lock();
    require(&s, not_busy)?;
    let region = OverviewRegion {
        retained: true,
        ..retained.overview
    };
    s.upper_left = Some(region.upper_left);
    s.lower_right = Some(region.lower_right);
    s.overview = Some(region);
    s.clear_overview_products();
    let mut rois = Vec::new();
    if let Some((origin, scale)) = overview_frame(&st, &s) {
        for (id, rect) in retained.rois.iter().enumerate() {
            if (Roi { id, rect: *rect }).validate_in(&region).is_ok() {
                rois.push(RoiEntry {
                    id,
                    stage: *rect,
                    pixel: stage_to_pixel_rect(origin, scale, rect),
                });
            }
        }
    }
    let next = if rois.is_empty() { Phase::OverviewSetup } else { Phase::FocusSetup };
    let n = rois.len();
    s.rois = rois;
    s.transition(next, "overview_use_retained", json!({ "rois": n }));
    Ok(Json(snapshot(&st, &s)))
}

async fn overview_acquire(State(st): State<AppState>) -> ApiResult<Json<Snapshot>> {
    let (region, dir) = {
        let mut s = st.session.lock();
        require(&s, |p| p == Phase::OverviewSetup)?;
        let region = match s.overview {
            Some(r) => r,
            None => corners_region(&s)?,
        };
        let dir = st.run_dir(&s.params.name);
        s.transition(Phase::OverviewAcquiring, "overview_acquire", json!({}));
        (region, dir)
    };
    let label = st.config.overview_objective_label().unwrap_or_default();
    let channel = st.config.overview_channel;
    let exposure = st.config.overview_exposure_ms;
    let mut scope = st.scope.clone();
    let result = tokio::task::spawn_blocking(move || {
        let layout = OutputLayout::new(dir);
        layout.create()?;
        acquire_overview(&mut scope, &region, &label, channel, exposure, Some(&layout))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?;

    let mut s = st.session.lock();
    sync_clock(&st, &mut s);
    match result {
        Ok((img, warnings)) => {
            let detail = json!({
                "width": img.panorama.image.width(),
                "height": img.panorama.image.height(),
                "warnings": warnings,
            });
            s.overview = Some(region);
            s.overview_image = Some((img, channel));
            s.transition(Phase::RoiSelection, "overview_ready", detail);
            Ok(Json(snapshot(&st, &s)))
        }
        Err(e) => {
            let msg = e.to_string();
            s.last_error = Some(msg.clone());
            s.transition(Phase::OverviewSetup, "overview_failed", json!({ "error": msg }));
            Err(ApiError::Internal(msg))
        }
    }
}

#[derive(Deserialize, Default)]
struct ImageQuery {
    format: Option<String>,
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn render(img: &Image, window: Option<Window>) -> ApiResult<Response> {
    render_png(img, window).map(png_response).map_err(ApiError::Internal)
}

async fn overview_image(
    State(st): State<AppState>,
    q: Result<Query<ImageQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = q.map_err(|e| ApiError::Unprocessable(e.body_text()))?.0;
    let (img, window) = {
        let s = st.session.lock();
        let (ov, ch) = s
            .overview_image
            .as_ref()
            .ok_or_else(|| ApiError::NotFound("no overview has been acquired".into()))?;
        (ov.panorama.image.clone(), s.window_for(None, *ch))
    };
    match q.format.as_deref() {
        None | Some("png") => render(&img, window),
        Some("tiff") | Some("tif") => Ok(([(header::CONTENT_TYPE, "image/tiff")], encode_tiff(&img)).into_response()),
        Some(other) => Err(ApiError::Unprocessable(format!("unknown format {other:?}"))),
    }
}

#[derive(Deserialize)]
struct RoisBody {
    rois: Vec<PixelRect>,
}

async fn set_rois(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Snapshot>> {
    let req: RoisBody = parse(&body)?;
    let mut s = st.session.lock();
    require(&s, |p| matches!(p, Phase::RoiSelection | Phase::FocusSetup | Phase::Done))?;
    let region = s.overview.ok_or_else(|| ApiError::field("overview", "no overview region"))?;
    let (origin, scale) = overview_frame(&st, &s).ok_or_else(|| ApiError::field("overview", "no overview geometry"))?;
    if req.rois.is_empty() {
        return Err(ApiError::field("rois", "at least one ROI is required"));
    }
    let mut errs = Vec::new();
    let mut rois = Vec::with_capacity(req.rois.len());
    for (id, px) in req.rois.iter().enumerate() {
        let field = format!("rois[{id}]");
        if ![px.x, px.y, px.width, px.height].iter().all(|v| v.is_finite()) || px.width <= 0.0 || px.height <= 0.0 {
            errs.push(FieldError {
                field,
                message: "rectangle needs a positive width and height".into(),
            });
            continue;
        }
        let ul = StagePoint::new(origin.x + px.x * scale, origin.y + px.y * scale);
        let lr = StagePoint::new(ul.x + px.width * scale, ul.y + px.height * scale);
        let rect = StageRect::from_corners(ul, lr);
        match (Roi { id, rect }).validate_in(&region) {
            Ok(()) => rois.push(RoiEntry {
                id,
                stage: rect,
                pixel: *px,
            }),
            Err(e) => errs.push(FieldError {
                field,
                message: e.to_string(),
            }),
        }
    }
    if !errs.is_empty() {
        return Err(ApiError::Invalid(errs));
    }
    let n = rois.len();
    s.rois = rois;
    s.transition(Phase::FocusSetup, "rois", json!({ "count": n }));
    Ok(Json(snapshot(&st, &s)))
}

#[derive(Deserialize)]
struct StageMove {
    #[serde(default)]
    dx: f64,
    #[serde(default)]
    dy: f64,
}

async fn stage_move(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Snapshot>> {
    let req: StageMove = parse(&body)?;
    if !(req.dx.is_finite() && req.dy.is_finite()) {
        return Err(ApiError::field("dx", "offsets must be finite"));
    }
    let mut s = st.session.lock();
    require(&s, not_busy)?;
    let mut scope = st.scope.clone();
    let at = scope.state().stage_xy;
    let target = StagePoint::new(at.x + req.dx, at.y + req.dy);
    scope.set_stage_xy(target).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    sync_clock(&st, &mut s);
    let before = s.phase;
    s.commit(before, "stage_move", json!({ "x": target.x, "y": target.y }));
    Ok(Json(snapshot(&st, &s)))
}

#[derive(Deserialize)]
struct ZMove {
    dz: f64,
}

async fn z_move(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Snapshot>> {
    let req: ZMove = parse(&body)?;
    if !req.dz.is_finite() {
        return Err(ApiError::field("dz", "offset must be finite"));
    }
    let mut s = st.session.lock();
    require(&s, not_busy)?;
    let mut scope = st.scope.clone();
    let z = scope.state().z + req.dz;
    scope.set_z(z).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    sync_clock(&st, &mut s);
    let before = s.phase;
    s.commit(before, "z_move", json!({ "z": z }));
    Ok(Json(snapshot(&st, &s)))
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum FocusBound {
    Min,
    Max,
}

#[derive(Deserialize)]
struct FocusBody {
    which: FocusBound,
}

async fn focus_register(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Snapshot>> {
    let req: FocusBody = parse(&body)?;
    let mut s = st.session.lock();
    require(&s, |p| p == Phase::FocusSetup)?;
    let z = st.scope.state().z;
    let which = match req.which {
        FocusBound::Min => {
            s.z_min = Some(z);
            "min"
        }
        FocusBound::Max => {
            s.z_max = Some(z);
            "max"
        }
    };
    let before = s.phase;
    s.commit(before, "focus_register", json!({ "which": which, "z": z }));
    Ok(Json(snapshot(&st, &s)))
}

#[derive(Deserialize)]
struct ContrastBody {
    roi: Option<usize>,
    channel: Channel,
    lo: u16,
    hi: u16,
}

async fn set_contrast(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Snapshot>> {
    let req: ContrastBody = parse(&body)?;
    if req.lo >= req.hi {
        return Err(ApiError::field("lo", "must be below hi"));
    }
    let mut s = st.session.lock();
    s.contrast.insert((req.roi, req.channel), Window { lo: req.lo, hi: req.hi });
    let before = s.phase;
    s.commit(
        before,
        "contrast",
        json!({ "roi": req.roi, "channel": req.channel, "lo": req.lo, "hi": req.hi }),
    );
    Ok(Json(snapshot(&st, &s)))
}

/// The time-lapse setup the session describes. Registered focus bounds
/// become a stack centred on the autofocus plane spanning their distance.
fn build_setup(st: &AppState, s: &Session) -> ApiResult<AcquisitionSetup> {
    let mut params = s.params.clone();
    if let (Some(lo), Some(hi)) = (s.z_min, s.z_max) {
        let centre = (lo + hi) / 2.0;
        params.z_min_um = lo - centre;
        params.z_max_um = hi - centre;
    }
    params.normalize();
    let overview = s.overview.ok_or_else(|| ApiError::field("overview", "no overview region"))?;
    let rois = s.rois.iter().map(|r| Roi { id: r.id, rect: r.stage }).collect();
    let setup = AcquisitionSetup::new(params, overview, rois);
    let mut errs = setup.field_errors();
    if !st.config.simulator.objectives.iter().any(|o| o.label == setup.params.objective) {
        errs.push(FieldError {
            field: "params.objective".into(),
            message: format!("no objective labelled {:?}", setup.params.objective),
        });
    }
    if errs.is_empty() {
        Ok(setup)
    } else {
        Err(ApiError::Invalid(errs))
    }
}

async fn acquisition_start(State(st): State<AppState>) -> ApiResult<Json<Snapshot>> {
    let mut s = st.session.lock();
    require(&s, |p| p == Phase::FocusSetup)?;
    let mut setup = build_setup(&st, &s)?;
    let plans = plan_tiles(&st.scope, &setup).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let per_step: usize = plans.iter().map(|p| p.len() * p.z_stack.len()).sum::<usize>() * setup.params.channels.len();
    let total = schedule(&setup.params).len() * per_step;
    let dir = st.run_dir(&setup.params.name);
    if setup.params.apply_flattening {
        setup.flat_fields = if s.flat_fields.is_empty() {
            let layout = OutputLayout::new(&dir);
            let channels = setup.params.channels.keys().copied();
            load_flat_fields(&layout.resume_dir(), channels, &setup.params.objective)
                .map_err(|e| ApiError::Internal(e.to_string()))?
        } else {
            s.flat_fields.clone()
        };
    }
    let primary = setup
        .params
        .stitch_mode
        .registration_channel()
        .or_else(|| setup.params.channels.keys().next().copied())
        .unwrap_or(Channel::PC);
    s.progress = crate::session::Progress {
        total,
        ..Default::default()
    };
    s.frames.clear();
    s.stabilized.clear();
    s.last_error = None;
    s.run = Some(RunInfo {
        dir: dir.clone(),
        name: setup.params.name.clone(),
        primary_channel: primary,
    });
    st.control.reset();
    s.transition(Phase::Running, "acquisition_start", json!({ "total": total, "dir": dir }));
    let snap = snapshot(&st, &s);
    drop(s);

    let scope = st.scope.clone();
    let session = st.session.clone();
    let control = st.control.clone();
    std::thread::Builder::new()
        .name("acquisition".into())
        .spawn(move || {
            let observer = SessionObserver {
                session: session.clone(),
                control,
            };
            let result = run_timelapse(scope.clone(), &setup, &dir, observer);
            finish_run(&session, &scope, result);
        })
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(snap))
}

fn finish_run(
    session: &Mutex<Session>,
    scope: &crate::run::SharedScope,
    result: Result<tilescope::acquisition::AcquisitionRecord, tilescope::acquisition::AcquisitionError>,
) {
    let mut s = session.lock();
    s.sim_time = s.sim_time.max(scope.state().sim_clock);
    match result {
        Ok(record) => {
            s.progress.stopped = record.stopped;
            tracing::info!(completed = record.completed.len(), stopped = record.stopped, "acquisition finished");
            s.transition(
                Phase::Done,
                "acquisition_finished",
                json!({
                    "completed": record.completed.len(),
                    "aborted": record.aborted,
                    "stopped": record.stopped,
                    "tiles_captured": record.tiles_captured,
                }),
            );
        }
        Err(e) => {
            let msg = e.to_string();
            tracing::error!(error = %msg, "acquisition failed");
            s.last_error = Some(msg.clone());
            s.transition(Phase::Error, "acquisition_failed", json!({ "error": msg }));
        }
    }
}

async fn acquisition_pause(State(st): State<AppState>) -> ApiResult<Json<Snapshot>> {
    let mut s = st.session.lock();
    require(&s, |p| p == Phase::Running)?;
    st.control.set_paused(true);
    s.transition(Phase::Paused, "acquisition_pause", json!({}));
    Ok(Json(snapshot(&st, &s)))
}

async fn acquisition_resume(State(st): State<AppState>) -> ApiResult<Json<Snapshot>> {
    let mut s = st.session.lock();
    require(&s, |p| p == Phase::Paused)?;
    st.control.set_paused(false);
    s.transition(Phase::Running, "acquisition_resume", json!({}));
    Ok(Json(snapshot(&st, &s)))
}

async fn acquisition_stop(State(st): State<AppState>) -> ApiResult<Response> {
    let mut s = st.session.lock();
    require(&s, |p| matches!(p, Phase::Running | Phase::Paused))?;
    st.control.request_stop();
    let before = s.phase;
    s.commit(before, "acquisition_stop", json!({}));
    Ok((StatusCode::ACCEPTED, Json(snapshot(&st, &s))).into_response())
}

async fn flattening_create(State(st): State<AppState>) -> ApiResult<Json<Snapshot>> {
    let (setup, dir) = {
        let s = st.session.lock();
        require(&s, |p| p == Phase::FocusSetup)?;
        let setup = build_setup(&st, &s)?;
        let dir = st.run_dir(&setup.params.name);
        (setup, dir)
    };
    let scope = st.scope.0.clone();
    let level = st.config.flattening.reference_level;
    let fields = tokio::task::spawn_blocking(move || {
        let layout = OutputLayout::new(dir);
        layout.create()?;
        let mut guard = scope.lock();
        create_flattening_on_reference_slide(&mut guard, &setup, &layout, level)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::Internal(e.to_string()))?;

    let mut s = st.session.lock();
    sync_clock(&st, &mut s);
    let channels: Vec<Channel> = fields.keys().copied().collect();
    s.flat_fields = fields;
    let before = s.phase;
    s.commit(before, "flattening_create", json!({ "channels": channels }));
    Ok(Json(snapshot(&st, &s)))
}

async fn flattening_apply_toggle(State(st): State<AppState>) -> ApiResult<Json<Snapshot>> {
    let mut s = st.session.lock();
    require(&s, not_busy)?;
    s.params.apply_flattening = !s.params.apply_flattening;
    let on = s.params.apply_flattening;
    let before = s.phase;
    s.commit(before, "flattening_apply_toggle", json!({ "apply_flattening": on }));
    Ok(Json(snapshot(&st, &s)))
}

#[derive(Deserialize, Default)]
struct EventsQuery {
    since: Option<u64>,
    timeout_ms: Option<u64>,
}

fn wants_sse(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/event-stream"))
}

async fn get_events(
    State(st): State<AppState>,
    headers: HeaderMap,
    q: Result<Query<EventsQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = q.map_err(|e| ApiError::Unprocessable(e.body_text()))?.0;
    let last_event_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let since = last_event_id.or(q.since).unwrap_or(0);
    if wants_sse(&headers) {
        return Ok(event_stream(&st, since).into_response());
    }
    let (mut batch, mut rx) = {
        let s = st.session.lock();
        (s.events.since(since), s.events.subscribe())
    };
    let wait = q.timeout_ms.unwrap_or(0).min(MAX_POLL_MS);
    if batch.events.is_empty() && !batch.gap && wait > 0 {
        let _ = tokio::time::timeout(Duration::from_millis(wait), rx.changed()).await;
        batch = st.session.lock().events.since(since);
    }
    Ok(Json(batch).into_response())
}

struct StreamCursor {
    session: std::sync::Arc<Mutex<Session>>,
    cursor: u64,
    rx: watch::Receiver<u64>,
    pending: VecDeque<Event>,
}

fn sse_event(kind: &str, id: Option<u64>, data: &impl Serialize) -> Event {
    let ev = Event::default().event(kind);
    let ev = match id {
        Some(id) => ev.id(id.to_string()),
        None => ev,
    };
    ev.json_data(data).unwrap_or_else(|_| Event::default().event(kind))
}

/// Server-sent events from `since` on: id is the sequence number, the event
/// name is the kind, and a `gap` event reports dropped events.
fn event_stream(st: &AppState, since: u64) -> Sse<impl futures::Stream<Item = Result<Event, Infallible>>> {
    let rx = st.session.lock().events.subscribe();
    let start = StreamCursor {
        session: st.session.clone(),
        cursor: since,
        rx,
        pending: VecDeque::new(),
    };
    let stream = futures::stream::unfold(start, |mut c| async move {
        loop {
            if let Some(ev) = c.pending.pop_front() {
                return Some((Ok(ev), c));
            }
            {
                let batch = c.session.lock().events.since(c.cursor);
                if batch.gap {
                    let gap = json!({ "since": c.cursor, "last_seq": batch.last_seq });
                    c.pending.push_back(sse_event("gap", None, &gap));
                }
                for e in &batch.events {
                    c.pending.push_back(sse_event(&e.kind, Some(e.seq), e));
                }
                c.cursor = c.cursor.max(batch.last_seq);
            }
            if c.pending.is_empty() && c.rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

#[derive(Deserialize, Default)]
struct FrameQuery {
    #[serde(default)]
    stabilized: bool,
}

async fn get_frame(
    State(st): State<AppState>,
    path: Result<Path<(usize, usize, String)>, PathRejection>,
    q: Result<Query<FrameQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Path((roi, t, ch)) = path.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    let q = q.map_err(|e| ApiError::Unprocessable(e.body_text()))?.0;
    let channel: Channel = ch.parse().map_err(|e: tilescope::imaging::ImageError| ApiError::Unprocessable(e.to_string()))?;
    let (file, window) = {
        let s = st.session.lock();
        let run = s.run.as_ref().ok_or_else(|| ApiError::NotFound("no acquisition has run".into()))?;
        let out = OutputLayout::new(&run.dir);
        let file: Option<PathBuf> = if q.stabilized {
            let dir = out.stabilized_dir(roi);
            let tagged = dir.join(layout::stabilized_file_name(&run.name, t, Some(channel)));
            let plain = dir.join(layout::stabilized_file_name(&run.name, t, None));
            if tagged.exists() {
                Some(tagged)
            } else if channel == run.primary_channel && plain.exists() {
                Some(plain)
            } else {
                None
            }
        } else {
            let key = FrameKey {
                roi,
                timestep: t,
                channel,
            };
            let on_disk = out.stitched_path(roi, &run.name, t, channel);
            s.frames.get(&key).cloned().or_else(|| on_disk.exists().then_some(on_disk))
        };
        let file = file.ok_or_else(|| ApiError::NotFound(format!("no frame for roi {roi}, t {t}, {channel}")))?;
        (file, s.window_for(Some(roi), channel))
    };
    let img = load_tiff(&file).map_err(|e| ApiError::Internal(e.to_string()))?;
    render(&img, window)
}
