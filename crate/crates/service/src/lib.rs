//! HTTP/JSON front end of the session engine.
//!
//! One session is active at a time. Commands are serialized through a
//! mutex around the engine; frame rendering runs outside the lock on the
//! blocking pool.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use colorvib_core::gaze::Point2;
use colorvib_core::psychometry::{ThresholdTable, UserCalibration};
use colorvib_core::session::api::{
    check_version, ActionResponse, AdvanceRequest, CalibrationStepRequest, CalibrationStepResponse, CurrentTrialView,
    ErrorBody, QuestionnaireRequest, ResponseRequest, StartRequest, StartResponse, StateResponse,
    API_VERSION,
};
use colorvib_core::session::clock::{Clock, MonotonicClock};
use colorvib_core::session::config::SessionConfig;
use colorvib_core::session::log::SessionHeader;
use colorvib_core::session::plan::{ProtocolPlan, StudyKind};
use colorvib_core::session::render::{render_stimulus, GuidanceAsset, RenderContext, StimulusId};
use colorvib_core::session::trial::RoiDisk;
use colorvib_core::session::{Session, SessionEnv, SessionError};
use colorvib_core::stimulus::{self, prepare_image, RoiSpec};
use colorvib_core::vibration::EllipseCatalog;
use image::RgbImage;
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::Mutex;

const FRAME_CACHE_LIMIT: usize = 8;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("cannot load {path}: {reason}")]
    Asset { path: PathBuf, reason: String },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Read-only inputs shared by every request.
struct Assets {
    config: SessionConfig,
    catalog: EllipseCatalog,
    table: Option<ThresholdTable>,
    guidance: Vec<GuidanceAsset>,
    rois: Vec<RoiDisk>,
}

type Frames = Arc<(Vec<u8>, Vec<u8>)>;

#[derive(Clone)]
pub struct AppState {
    session: Arc<Mutex<Option<Session>>>,
    frames: Arc<std::sync::Mutex<HashMap<String, Frames>>>,
    assets: Arc<Assets>,
    clock: Arc<dyn Clock>,
}

fn load_assets(config: SessionConfig) -> Result<Assets, ServiceError> {
    config.validate()?;
    let table = match &config.guidance.table {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| ServiceError::Asset {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Some(ThresholdTable::read_csv(file).map_err(|e| ServiceError::Asset {
                path: path.clone(),
                reason: e.to_string(),
            })?)
        }
        None => None,
    };
    let scale = config.display.px_per_mm().map_err(SessionError::from)?;
    let mut guidance = Vec::new();
    let mut rois = Vec::new();
    for img in &config.guidance.images {
        let asset_err = |reason: String| ServiceError::Asset {
            path: img.path.clone(),
            reason,
        };
        let raster = image::open(&img.path).map_err(|e| asset_err(e.to_string()))?.to_rgb8();
        let prepared = prepare_image(&raster).map_err(|e| asset_err(e.to_string()))?;
        let roi = RoiSpec {
            center_px: (img.roi_x_px, img.roi_y_px),
            roi_diameter_mm: img.roi_diameter_mm,
            vibration_diameter_mm: img.vibration_diameter_mm,
        };
        rois.push(RoiDisk {
            center: Point2::new(img.roi_x_px, img.roi_y_px),
            radius_px: img.roi_diameter_mm * scale / 2.0,
        });
        guidance.push(GuidanceAsset { image: prepared, roi });
    }
    Ok(Assets {
        config,
        catalog: EllipseCatalog::bundled(),
        table,
        guidance,
        rois,
    })
}

impl AppState {
    /// Loads the threshold table and guidance images named in `config`.
    pub fn new(config: SessionConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        Ok(Self {
            session: Arc::new(Mutex::new(None)),
            frames: Arc::new(std::sync::Mutex::new(HashMap::new())),
            assets: Arc::new(load_assets(config)?),
            clock,
        })
    }

    pub fn with_monotonic_clock(config: SessionConfig) -> Result<Self, ServiceError> {
        Self::new(config, Arc::new(MonotonicClock::new()))
    }

    fn now(&self) -> f64 {
        self.clock.now_s()
    }

    fn env(&self) -> SessionEnv {
        SessionEnv {
            protocol: self.assets.config.protocol.clone(),
            rois: self.assets.rois.clone(),
        }
    }
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::SequenceViolation(_) | SessionError::DuplicateRecord(_) => StatusCode::CONFLICT,
            SessionError::InvalidLikert { .. } | SessionError::InvalidResponse(_) | SessionError::InvalidRecord(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            SessionError::UnsupportedVersion { .. } => StatusCode::BAD_REQUEST,
            SessionError::UnknownStimulus(_) => StatusCode::NOT_FOUND,
            SessionError::StorageFailure(_) | SessionError::LogCorrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            SessionError::Config(_) | SessionError::Stimulus(_) | SessionError::Psychometry(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        if status.is_server_error() {
            log::error!("{e}");
        }
        Self {
            status,
            body: ErrorBody::from(&e),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::plain(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl ApiError {
    fn plain(status: StatusCode, error: &str, message: String) -> Self {
        Self {
            status,
            body: ErrorBody {
                version: API_VERSION,
                error: error.to_string(),
                message,
            },
        }
    }

    fn no_session() -> Self {
        Self::plain(StatusCode::CONFLICT, "no_session", "no session has been started".into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    Ok(payload?.0)
}

async fn get_state(State(app): State<AppState>) -> ApiResult<StateResponse> {
    let mut guard = app.session.lock().await;
    let now = app.now();
    Ok(Json(StateResponse {
        version: API_VERSION,
        session: guard.as_mut().map(|s| s.state_view(now)),
    }))
}

fn valid_participant(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn kind_name(kind: StudyKind) -> &'static str {
    match kind {
        StudyKind::Threshold => "threshold",
        StudyKind::Guidance => "guidance",
    }
}

async fn post_start(
    State(app): State<AppState>,
    payload: Result<Json<StartRequest>, JsonRejection>,
) -> ApiResult<StartResponse> {
    let req = body(payload)?;
    check_version(req.version)?;
    if !valid_participant(&req.participant) {
        return Err(ApiError::plain(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_participant",
            "participant ids use letters, digits, '-' and '_' only".into(),
        ));
    }
    let mut guard = app.session.lock().await;
    let now = app.now();
    if let Some(s) = guard.as_mut() {
        if s.state_view(now).phase != colorvib_core::session::SessionPhase::Complete {
            return Err(ApiError::plain(
                StatusCode::CONFLICT,
                "session_active",
                format!("session for {} is still running", s.header().participant),
            ));
        }
    }
    let dir = &app.assets.config.log_dir;
    std::fs::create_dir_all(dir).map_err(|e| SessionError::StorageFailure(e.to_string()))?;
    let path = dir.join(format!("{}-{}.jsonl", req.participant, kind_name(req.kind)));
    let (mut session, warnings) = if req.resume && path.exists() {
        let (s, w) = Session::resume(&path, app.env())?;
        if s.header().kind != req.kind || s.header().participant != req.participant || s.header().seed != req.seed {
            return Err(ApiError::plain(
                StatusCode::CONFLICT,
                "log_mismatch",
                format!("{} was written for a different study or seed", path.display()),
            ));
        }
        (s, w)
    } else {
        if path.exists() {
            return Err(ApiError::plain(
                StatusCode::CONFLICT,
                "log_exists",
                format!("{} already exists; start with resume to continue it", path.display()),
            ));
        }
        let image_sets = app.assets.rois.len() as u32;
        let header = SessionHeader::new(&req.participant, req.kind, req.seed, image_sets);
        (Session::start(header, app.env(), Some(&path))?, Vec::new())
    };
    log::info!("session {} started, log {}", req.participant, path.display());
    let view = session.state_view(now);
    *guard = Some(session);
    app.frames.lock().expect("frame cache poisoned").clear();
    Ok(Json(StartResponse {
        version: API_VERSION,
        session: view,
        warnings,
    }))
}

async fn get_current_trial(State(app): State<AppState>) -> ApiResult<CurrentTrialView> {
    let mut guard = app.session.lock().await;
    let s = guard.as_mut().ok_or_else(ApiError::no_session)?;
    let view = s.state_view(app.now());
    let active = s.active_trial().filter(|_| view.trial.is_some()).ok_or_else(|| {
        ApiError::plain(StatusCode::NOT_FOUND, "no_trial", format!("no trial during {:?}", view.phase))
    })?;
    Ok(Json(CurrentTrialView {
        version: API_VERSION,
        trial: active.index,
        phase: view.phase,
        spec: active.spec,
        stimulus: view.stimulus,
        fixation_s: app.assets.config.protocol.fixation_s,
        search_limit_s: app.assets.config.protocol.search_limit_s,
    }))
}

async fn act(
    app: &AppState,
    f: impl FnOnce(&mut Session, f64) -> Result<(), SessionError>,
) -> ApiResult<ActionResponse> {
    let mut guard = app.session.lock().await;
    let s = guard.as_mut().ok_or_else(ApiError::no_session)?;
    let now = app.now();
    f(s, now)?;
    Ok(Json(ActionResponse {
        version: API_VERSION,
        session: s.state_view(now),
    }))
}

async fn post_response(
    State(app): State<AppState>,
    payload: Result<Json<ResponseRequest>, JsonRejection>,
) -> ApiResult<ActionResponse> {
    let req = body(payload)?;
    check_version(req.version)?;
    act(&app, |s, now| s.respond(req.response, now)).await
}

async fn post_questionnaire(
    State(app): State<AppState>,
    payload: Result<Json<QuestionnaireRequest>, JsonRejection>,
) -> ApiResult<ActionResponse> {
    let req = body(payload)?;
    check_version(req.version)?;
    act(&app, |s, now| s.questionnaire(req.naturalness, req.obtrusiveness, now)).await
}

async fn post_advance(
    State(app): State<AppState>,
    payload: Result<Json<AdvanceRequest>, JsonRejection>,
) -> ApiResult<ActionResponse> {
    check_version(body(payload)?.version)?;
    act(&app, |s, now| s.advance(now)).await
}

async fn post_calibration_step(
    State(app): State<AppState>,
    payload: Result<Json<CalibrationStepRequest>, JsonRejection>,
) -> ApiResult<CalibrationStepResponse> {
    let req = body(payload)?;
    check_version(req.version)?;
    let mut guard = app.session.lock().await;
    let s = guard.as_mut().ok_or_else(ApiError::no_session)?;
    let now = app.now();
    let outcome = s.calibration_step(req.input, now)?;
    Ok(Json(CalibrationStepResponse {
        version: API_VERSION,
        outcome,
        session: s.state_view(now),
    }))
}

fn encode_png(frame: &RgbImage) -> Result<Vec<u8>, SessionError> {
    stimulus::encode_png(frame).map_err(|e| SessionError::StorageFailure(format!("png encoding: {e}")))
}

struct RenderJob {
    id: StimulusId,
    plan: ProtocolPlan,
    calibration: Option<UserCalibration>,
}

fn render_job(assets: &Assets, job: &RenderJob) -> Result<(Vec<u8>, Vec<u8>), SessionError> {
    let ctx = RenderContext {
        profile: &assets.config.display,
        ellipse: assets.catalog.base(),
        protocol: &assets.config.protocol,
        plan: &job.plan,
        calibration: job.calibration.as_ref(),
        table: assets.table.as_ref(),
        assets: &assets.guidance,
    };
    let (a, b) = render_stimulus(job.id, &ctx)?;
    Ok((encode_png(&a)?, encode_png(&b)?))
}

async fn get_stimulus(State(app): State<AppState>, Path((id, frame)): Path<(String, String)>) -> Result<Response, ApiError> {
    let parsed: StimulusId = id.parse()?;
    let which = match frame.as_str() {
        "a" => 0,
        "b" => 1,
        _ => return Err(SessionError::UnknownStimulus(format!("{id}/{frame}")).into()),
    };
    let key = parsed.to_string();
    let cached = app.frames.lock().expect("frame cache poisoned").get(&key).cloned();
    let frames = match cached {
        Some(f) => f,
        None => {
            let job = {
                let guard = app.session.lock().await;
                let s = guard.as_ref().ok_or_else(ApiError::no_session)?;
                RenderJob {
                    id: parsed,
                    plan: s.plan().clone(),
                    calibration: s.user_calibration(),
                }
            };
            let assets = app.assets.clone();
            let rendered = tokio::task::spawn_blocking(move || render_job(&assets, &job))
                .await
                .map_err(|e| ApiError::plain(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
            let frames = Arc::new(rendered);
            let mut cache = app.frames.lock().expect("frame cache poisoned");
            if cache.len() >= FRAME_CACHE_LIMIT {
                cache.clear();
            }
            cache.insert(key, frames.clone());
            frames
        }
    };
    let bytes = if which == 0 { frames.0.clone() } else { frames.1.clone() };
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], bytes).into_response())
}

#[derive(Serialize)]
struct Health {
    version: u32,
    status: &'static str,
}

async fn get_health() -> Json<Health> {
    Json(Health {
        version: API_VERSION,
        status: "ok",
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(get_health))
        .route("/session/state", get(get_state))
        .route("/session/start", post(post_start))
        .route("/trial/current", get(get_current_trial))
        .route("/trial/response", post(post_response))
        .route("/trial/advance", post(post_advance))
        .route("/calibration/step", post(post_calibration_step))
        .route("/questionnaire", post(post_questionnaire))
        .route("/stimulus/{id}/{frame}", get(get_stimulus))
        .with_state(state)
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
        addr: addr.to_string(),
        source,
    })
}

/// Serves until `shutdown` resolves. Records are already on disk when each
/// request returns, so stopping needs no extra flush.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    if let Some(a) = addr {
        log::info!("listening on http://{a}");
    }
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// The session, for embedding and tests.
pub async fn with_session<R>(state: &AppState, f: impl FnOnce(Option<&mut Session>) -> R) -> R {
    let mut guard = state.session.lock().await;
    f(guard.as_mut())
}
