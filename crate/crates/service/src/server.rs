//! HTTP backend for the calibration UI. Sessions hold one uploaded pair and
//! live in memory until they go unused for the TTL.

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use image::{DynamicImage, GrayImage, ImageFormat, Rgb, RgbImage};
use lcec::c3m::{C3mOutput, CorrespondenceSet};
use lcec::geometry::{Frame, Intrinsics, LidarPoint, RigidTransform};
use lcec::io::dataset::{load_scene, LABELS_FILE, RGB_MASKS_FILE};
use lcec::io::{ScenePair, SyntheticMaskProvider};
use lcec::lip::{fill_and_enhance, render_lip, LipImage};
use lcec::masks::{
    MaskDocument, MaskError, MaskProvider, MaskSetConfig, Modality, RemoteMaskProvider, StaticMaskProvider, SNAP_RADIUS,
};
use lcec::pipeline::{calibrate, manual_calibrate, CalibConfig, CalibrationError, CalibrationResult, StageError};
use lcec::pnp::{PnpConfig, PnpSolution};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::provider::ProviderSettings;

pub const SESSION_TTL: Duration = Duration::from_secs(30 * 60);
/// A manual pick is satisfactory below this residual.
pub const PICK_SATISFIED_PX: f64 = 2.0;
const POSE_TOLERANCE: f64 = 1e-6;
/// Uploaded pairs carry whole point clouds.
pub const BODY_LIMIT: usize = 512 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub ttl: Duration,
    /// Provider for sessions that bring no masks.
    pub default_remote: Option<ProviderSettings>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            ttl: SESSION_TTL,
            default_remote: None,
        }
    }
}

pub struct Session {
    pub pair: ScenePair,
    pub provider: Option<Arc<dyn MaskProvider>>,
    busy: AtomicBool,
    result: Mutex<Option<CalibrationResult>>,
    touched: Mutex<Instant>,
}

impl Session {
    pub fn new(pair: ScenePair, provider: Option<Arc<dyn MaskProvider>>) -> Self {
        Self {
            pair,
            provider,
            busy: AtomicBool::new(false),
            result: Mutex::new(None),
            touched: Mutex::new(Instant::now()),
        }
    }

    fn touch(&self) {
        *lock(&self.touched) = Instant::now();
    }

    fn idle_for(&self) -> Duration {
        lock(&self.touched).elapsed()
    }

    pub fn last_result(&self) -> Option<CalibrationResult> {
        lock(&self.result).clone()
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

pub struct AppState {
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    config: ServerConfig,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Arc<Self> {
        Arc::new(Self {
            sessions: Mutex::new(HashMap::new()),
            config,
        })
    }

    /// Registers a session and returns its id.
    pub fn insert_session(&self, session: Session) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        self.purge();
        lock(&self.sessions).insert(id.clone(), Arc::new(session));
        id
    }

    pub fn session_count(&self) -> usize {
        lock(&self.sessions).len()
    }

    /// Drops sessions idle for longer than the TTL.
    pub fn purge(&self) {
        let ttl = self.config.ttl;
        lock(&self.sessions).retain(|_, s| s.idle_for() <= ttl);
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.purge();
        let s = lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session {id}")))?;
        s.touch();
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                kind: kind.into(),
            },
        }
    }

    fn unprocessable(kind: &str, error: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, kind, error)
    }

    fn internal(error: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", error)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<CalibrationError> for ApiError {
    fn from(e: CalibrationError) -> Self {
        let status = match &e {
            CalibrationError::CalibrationFailed {
                source: StageError::Masks(MaskError::ProviderUnavailable(_)),
                ..
            } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsBody {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MasksBody {
    /// Per-point object labels plus the RGB mask document.
    Synthetic { point_labels: Vec<u32>, rgb: MaskDocument },
    Static {
        rgb: MaskDocument,
        #[serde(default)]
        lip: Option<MaskDocument>,
    },
    Remote {
        url: String,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
}

/// Either a scene directory readable by the server or an inline pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub scene_dir: Option<PathBuf>,
    /// `[x, y, z, intensity]` per point.
    #[serde(default)]
    pub cloud: Option<Vec<[f64; 4]>>,
    /// Base64 PNG.
    #[serde(default)]
    pub image_png: Option<String>,
    #[serde(default)]
    pub intrinsics: Option<IntrinsicsBody>,
    /// Row-major 4×4 ground truth.
    #[serde(default)]
    pub truth: Option<Vec<f64>>,
    #[serde(default)]
    pub masks: Option<MasksBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub width: u32,
    pub height: u32,
    pub points: usize,
    pub has_truth: bool,
    pub has_masks: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateBody {
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub initial_pose: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PoseQuery {
    pub pose: String,
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pick {
    /// RGB pixel.
    pub pixel: [f64; 2],
    /// LiDAR point; resolved from `lip_pixel` when absent.
    #[serde(default)]
    pub lidar: Option<[f64; 3]>,
    #[serde(default)]
    pub lip_pixel: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualPicksBody {
    pub picks: Vec<Pick>,
    /// Virtual camera pose of the LIP the `lip_pixel`s were clicked on.
    #[serde(default)]
    pub lip_pose: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualPicksResponse {
    pub solution: PnpSolution,
    /// Row-major 4×4 `T_C_L`.
    pub pose: [f64; 16],
    pub residuals: Vec<f64>,
    pub satisfied: Vec<bool>,
    pub planar: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rotation_error_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub translation_error_m: Option<f64>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/session", post(create_session))
        .route("/session/{id}/calibrate", post(calibrate_session))
        .route("/session/{id}/lip", get(lip_image))
        .route("/session/{id}/overlay", get(overlay_image))
        .route("/session/{id}/manual-picks", post(manual_picks))
        .route("/session/{id}/matches", get(matches))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub fn app(config: ServerConfig) -> (Router, Arc<AppState>) {
    let state = AppState::new(config);
    (router(state.clone()), state)
}

pub async fn serve(addr: SocketAddr, config: ServerConfig) -> std::io::Result<()> {
    let (router, state) = app(config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            state.purge();
        }
    });
    axum::serve(listener, router).await
}

/// Parses 16 comma-separated row-major values into a rigid transform.
pub fn parse_pose(text: &str, source: Frame, target: Frame) -> Result<RigidTransform, ApiError> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::unprocessable("MalformedPose", format!("pose values must be numbers: {e}")))?;
    pose_from_values(&values, source, target)
}

fn pose_from_values(values: &[f64], source: Frame, target: Frame) -> Result<RigidTransform, ApiError> {
    if values.len() != 16 {
        return Err(ApiError::unprocessable(
            "MalformedPose",
            format!("pose needs 16 values, got {}", values.len()),
        ));
    }
    RigidTransform::from_row_major(values, source, target, POSE_TOLERANCE)
        .map_err(|e| ApiError::unprocessable("MalformedPose", e.to_string()))
}

fn bad_request(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.to_string())
}

fn build_pair(body: &CreateSession) -> Result<(ScenePair, Option<std::path::PathBuf>), ApiError> {
    if let Some(dir) = &body.scene_dir {
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let parent = dir.parent().unwrap_or(std::path::Path::new("."));
        let pair = load_scene(parent, &id).map_err(|e| ApiError::unprocessable("LayoutError", e.to_string()))?;
        return Ok((pair, Some(dir.clone())));
    }
    let (Some(cloud), Some(png), Some(ki)) = (&body.cloud, &body.image_png, &body.intrinsics) else {
        return Err(bad_request("give scene_dir, or cloud, image_png and intrinsics"));
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(png)
        .map_err(|e| bad_request(format!("image_png: {e}")))?;
    let image = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| bad_request(format!("image_png: {e}")))?
        .to_rgb8();
    let intrinsics = Intrinsics::new(ki.fx, ki.fy, ki.cx, ki.cy, image.width(), image.height())
        .map_err(|e| ApiError::unprocessable("InvalidIntrinsics", e.to_string()))?;
    let cloud = cloud
        .iter()
        .map(|p| LidarPoint::new(Vector3::new(p[0], p[1], p[2]), p[3]))
        .collect();
    Ok((
        ScenePair {
            scene_id: "upload".into(),
            cloud,
            image,
            intrinsics,
            truth_extrinsics: None,
            subset: None,
        },
        None,
    ))
}

fn build_provider(
    masks: Option<&MasksBody>,
    scene_dir: Option<&std::path::Path>,
    config: &ServerConfig,
) -> Result<Option<Arc<dyn MaskProvider>>, ApiError> {
    let cfg = MaskSetConfig::default();
    let schema = |e: MaskError| ApiError::unprocessable(e.kind(), e.to_string());
    Ok(match masks {
        Some(MasksBody::Synthetic { point_labels, rgb }) => Some(Arc::new(SyntheticMaskProvider {
            point_labels: point_labels.clone(),
            rgb: rgb.to_mask_set(Modality::Rgb, &cfg).map_err(schema)?,
            config: cfg,
        })),
        Some(MasksBody::Static { rgb, lip }) => Some(Arc::new(StaticMaskProvider {
            rgb: rgb.to_mask_set(Modality::Rgb, &cfg).map_err(schema)?,
            lip: lip.as_ref().map(|d| d.to_mask_set(Modality::Lip, &cfg)).transpose().map_err(schema)?,
        })),
        Some(MasksBody::Remote { url, timeout_ms }) => Some(Arc::new(RemoteMaskProvider::new(
            url.clone(),
            Duration::from_millis(timeout_ms.unwrap_or(30_000)),
        ))),
        None => match scene_dir {
            Some(dir) if dir.join(LABELS_FILE).is_file() && dir.join(RGB_MASKS_FILE).is_file() => {
                Some(Arc::new(SyntheticMaskProvider::from_dir(dir).map_err(schema)?))
            }
            _ => match &config.default_remote {
                Some(settings) => Some(Arc::from(
                    settings.build(scene_dir.unwrap_or(std::path::Path::new("."))).map_err(schema)?,
                )),
                None => None,
            },
        },
    })
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(body): Json<CreateSession>,
) -> Result<Json<SessionCreated>, ApiError> {
    let task = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || -> Result<SessionCreated, ApiError> {
            let (mut pair, dir) = build_pair(&body)?;
            if let Some(t) = &body.truth {
                pair.truth_extrinsics = Some(pose_from_values(t, Frame::Lidar, Frame::Camera)?);
            }
            let provider = build_provider(body.masks.as_ref(), dir.as_deref(), &state.config)?;
            if let (Some(MasksBody::Synthetic { point_labels, .. }), n) = (&body.masks, pair.cloud.len()) {
                if point_labels.len() != n {
                    return Err(ApiError::unprocessable(
                        "InvalidMask",
                        format!("{} point labels for {n} points", point_labels.len()),
                    ));
                }
            }
            let created = SessionCreated {
                session_id: String::new(),
                width: pair.image.width(),
                height: pair.image.height(),
                points: pair.cloud.len(),
                has_truth: pair.truth_extrinsics.is_some(),
                has_masks: provider.is_some(),
            };
            let id = state.insert_session(Session::new(pair, provider));
            Ok(SessionCreated {
                session_id: id,
                ..created
            })
        })
    };
    let created = task.await.map_err(|e| ApiError::internal(e.to_string()))??;
    log::info!("session {} with {} points", created.session_id, created.points);
    Ok(Json(created))
}

/// Clears the busy flag when the calibration ends, however it ends.
struct Flight(Arc<Session>);

impl Drop for Flight {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

async fn calibrate_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<CalibrateBody>>,
) -> Result<Json<CalibrationResult>, ApiError> {
    let session = state.session(&id)?;
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let mut cfg = CalibConfig {
        pnp: PnpConfig {
            seed: body.seed.unwrap_or(0),
            ..PnpConfig::default()
        },
        ..CalibConfig::default()
    };
    if let Some(n) = body.iterations {
        if n == 0 {
            return Err(ApiError::unprocessable("InvalidInput", "iterations must be at least 1"));
        }
        cfg.max_iters = n;
    }
    if let Some(p) = &body.initial_pose {
        cfg.initial_pose = Some(pose_from_values(p, Frame::Lidar, Frame::Virtual)?);
    }
    let provider = session
        .provider
        .clone()
        .ok_or_else(|| ApiError::unprocessable("NoMaskProvider", "session has no mask provider"))?;
    if session
        .busy
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "CalibrationRunning",
            "a calibration is already running for this session",
        ));
    }
    let flight = Flight(session.clone());
    let result = tokio::task::spawn_blocking(move || {
        let s = &flight.0;
        let r = calibrate(&s.pair.cloud, &s.pair.image, &s.pair.intrinsics, provider.as_ref(), &cfg);
        if let Ok(res) = &r {
            *lock(&s.result) = Some(res.clone());
        }
        r
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(result))
}

fn render(session: &Session, pose: &RigidTransform) -> Result<LipImage, ApiError> {
    let lip = render_lip(&session.pair.cloud, pose, &session.pair.intrinsics)
        .map_err(|e| ApiError::unprocessable("LipError", e.to_string()))?;
    Ok(fill_and_enhance(&lip))
}

fn png_response(img: DynamicImage) -> Result<Response, ApiError> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// LIP rendered from the virtual camera `pose`, after hole filling.
pub fn lip_gray(session: &Session, pose: &RigidTransform) -> Result<GrayImage, ApiError> {
    Ok(render(session, pose)?.to_gray_image())
}

/// α-blend of the LIP rendered at `extrinsic` over the RGB image, on pixels
/// that carry LIP intensity.
pub fn overlay(session: &Session, extrinsic: &RigidTransform, alpha: f64) -> Result<RgbImage, ApiError> {
    let lip = render(session, &extrinsic.relabel(Frame::Lidar, Frame::Virtual))?;
    let mut out = session.pair.image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if lip.is_valid(x, y) {
            let l = lip.intensity(x, y) as f64;
            *px = Rgb(px.0.map(|c| (alpha * l + (1.0 - alpha) * c as f64).round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok(out)
}

async fn lip_image(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PoseQuery>,
) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let pose = parse_pose(&q.pose, Frame::Lidar, Frame::Virtual)?;
    let img = tokio::task::spawn_blocking(move || lip_gray(&session, &pose))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    png_response(DynamicImage::ImageLuma8(img))
}

async fn overlay_image(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PoseQuery>,
) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let pose = parse_pose(&q.pose, Frame::Lidar, Frame::Camera)?;
    let alpha = q.alpha.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ApiError::unprocessable("InvalidAlpha", format!("alpha {alpha} is outside [0, 1]")));
    }
    let img = tokio::task::spawn_blocking(move || overlay(&session, &pose, alpha))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    png_response(DynamicImage::ImageRgb8(img))
}

fn resolve_picks(session: &Session, body: &ManualPicksBody) -> Result<CorrespondenceSet, ApiError> {
    let needs_lip = body.picks.iter().any(|p| p.lidar.is_none());
    let lip = if needs_lip {
        let pose = body
            .lip_pose
            .as_ref()
            .ok_or_else(|| ApiError::unprocessable("MalformedPick", "picks without lidar need lip_pose"))?;
        Some(render(session, &pose_from_values(pose, Frame::Lidar, Frame::Virtual)?)?)
    } else {
        None
    };
    let mut set = CorrespondenceSet::default();
    for (i, p) in body.picks.iter().enumerate() {
        let point = match (p.lidar, p.lip_pixel, &lip) {
            (Some(l), _, _) => Vector3::new(l[0], l[1], l[2]),
            (None, Some(q), Some(lip)) => {
                let (x, y) = lip
                    .nearest_set_pixel(&Vector2::new(q[0], q[1]), SNAP_RADIUS)
                    .ok_or_else(|| ApiError::unprocessable("MalformedPick", format!("pick {i} hits no LiDAR point")))?;
                let idx = lip.point_index(x, y).expect("set pixel carries an index");
                session.pair.cloud[idx as usize].position
            }
            _ => {
                return Err(ApiError::unprocessable(
                    "MalformedPick",
                    format!("pick {i} needs lidar or lip_pixel"),
                ))
            }
        };
        set.push(Vector2::new(p.pixel[0], p.pixel[1]), point);
    }
    Ok(set)
}

async fn manual_picks(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<ManualPicksBody>,
) -> Result<Json<ManualPicksResponse>, ApiError> {
    let session = state.session(&id)?;
    let response = tokio::task::spawn_blocking(move || -> Result<ManualPicksResponse, ApiError> {
        let picks = resolve_picks(&session, &body)?;
        let s = manual_calibrate(&picks, &session.pair.intrinsics)
            .map_err(|e| ApiError::unprocessable("PnpError", e.to_string()))?;
        let metrics = session
            .pair
            .truth_extrinsics
            .as_ref()
            .map(|t| crate::cli::errors(&s.solution.pose, t));
        Ok(ManualPicksResponse {
            pose: s.solution.pose.to_row_major(),
            satisfied: s.residuals.iter().map(|r| *r < PICK_SATISFIED_PX).collect(),
            residuals: s.residuals.iter().map(|r| if r.is_finite() { *r } else { f64::MAX }).collect(),
            planar: s.planar,
            rotation_error_deg: metrics.map(|m| m.0),
            translation_error_m: metrics.map(|m| m.1),
            solution: s.solution,
        })
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(response))
}

async fn matches(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<C3mOutput>, ApiError> {
    let session = state.session(&id)?;
    let result = session
        .last_result()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "NoCalibration", "session has not been calibrated"))?;
    Ok(Json(result.last().matches.clone()))
}
