//! Session state and the axum router.

use std::io::Cursor;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use sanerf_core::camera::{CameraPose, PoseRecord};
use sanerf_core::checkpoint::Checkpoint;
use sanerf_core::mesh::{
    extract_mesh, extract_selected, project_mask, track_click, write_obj, Bvh, SelectionState, TrackedClick, TriMesh,
    SIGMA_THRESHOLD,
};
use sanerf_core::radiance::RadianceField;
use sanerf_core::rle::MaskRle;
use sanerf_core::semantic::{FeatureMap, SemanticField, SurfaceCaster};
use sanerf_core::teacher::{MaskResult, Teacher, TeacherKind};
use sanerf_core::trainer::render_rgb;
use sanerf_core::{Error as CoreError, Result as CoreResult};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::ApiError;
use crate::wire::{
    ClickAdded, ClickPosition, ClickPositions, ClickRequest, LogitsStats, ProjectRequest, PromptRequest, RenderRequest,
    SegmentResponse, SelectionResponse, SessionInfo,
};

/// Image side used when a pose omits its size.
pub const DEFAULT_VIEW: u32 = 256;
pub const MAX_SIDE: u32 = 2048;

#[derive(Clone, Debug)]
pub struct SessionOptions {
    /// Lattice resolution for the attached mesh; `None` serves without one.
    pub mesh_resolution: Option<usize>,
    pub sigma: f32,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            mesh_resolution: Some(96),
            sigma: SIGMA_THRESHOLD,
        }
    }
}

struct AttachedMesh {
    mesh: TriMesh,
    bvh: Bvh,
}

struct Interactive {
    selection: Option<SelectionState>,
    clicks: Vec<TrackedClick>,
}

/// One immutable model snapshot plus the mutable selection and clicks.
pub struct Session {
    snapshot_id: String,
    base: RadianceField,
    sem: SemanticField,
    teacher: Teacher,
    mesh: Option<AttachedMesh>,
    state: Mutex<Interactive>,
}

impl Session {
    pub fn from_checkpoint(ck: Checkpoint, opts: &SessionOptions) -> CoreResult<Self> {
        let sem = ck
            .semantic
            .ok_or_else(|| CoreError::Usage("checkpoint has no semantic field; run train-features first".into()))?;
        let spec = ck
            .teacher
            .ok_or_else(|| CoreError::Usage("checkpoint has no teacher spec; run train-features first".into()))?;
        let teacher = Teacher::new(spec)?;
        let mesh = match opts.mesh_resolution {
            Some(res) => match extract_mesh(&ck.radiance, res, opts.sigma) {
                Ok(m) => Some(m),
                Err(CoreError::EmptySurface(level)) => {
                    log::warn!("no surface at density {level}; serving without a mesh");
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        let snapshot_id = format!("{:016x}", ck.radiance.checksum() ^ sem.checksum().rotate_left(17));
        let mut session = Self {
            snapshot_id,
            base: ck.radiance,
            sem,
            teacher,
            mesh: None,
            state: Mutex::new(Interactive {
                selection: None,
                clicks: Vec::new(),
            }),
        };
        if let Some(m) = mesh {
            session = session.with_mesh(m);
        }
        Ok(session)
    }

    /// Attaches `mesh`, replacing any previous one and its selection.
    pub fn with_mesh(mut self, mesh: TriMesh) -> Self {
        let bvh = Bvh::new(&mesh);
        let selection = SelectionState::for_mesh(&mesh);
        log::info!("mesh attached: {} triangles", mesh.triangles.len());
        self.mesh = Some(AttachedMesh { mesh, bvh });
        self.state = Mutex::new(Interactive {
            selection: Some(selection),
            clicks: Vec::new(),
        });
        self
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            snapshot_id: self.snapshot_id.clone(),
            teacher_kind: self.teacher.kind(),
            prompt_vocabulary: self.teacher.spec().prompt_names(),
            mesh_attached: self.mesh.is_some(),
            mesh_triangle_count: self.mesh.as_ref().map_or(0, |m| m.mesh.triangles.len()),
            teacher_encode_calls: self.teacher.encode_calls(),
        }
    }

    fn state(&self) -> MutexGuard<'_, Interactive> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn attached(&self) -> Result<&AttachedMesh, ApiError> {
        self.mesh.as_ref().ok_or_else(ApiError::no_mesh)
    }

    pub fn render_png(&self, req: &RenderRequest) -> Result<Vec<u8>, ApiError> {
        let pose = pose_from(&req.pose, (req.width, req.height))?.with_size(req.width, req.height);
        let image = render_rgb(&self.base, &pose);
        let bytes: Vec<u8> = image
            .pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        let buffer = image::RgbImage::from_raw(image.width, image.height, bytes)
            .ok_or_else(|| ApiError::internal("render produced a short buffer"))?;
        let mut out = Cursor::new(Vec::new());
        buffer
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ApiError::internal(format!("png encoding: {e}")))?;
        Ok(out.into_inner())
    }

    fn features(&self, pose: &CameraPose, scales: usize) -> CoreResult<Vec<FeatureMap>> {
        let surface = self.mesh.as_ref().map(|m| &m.bvh as &dyn SurfaceCaster);
        (0..scales)
            .map(|s| self.sem.render_feature_map(&self.base, pose, s, surface))
            .collect()
    }

    pub fn segment_click(&self, req: &ClickRequest) -> Result<SegmentResponse, ApiError> {
        if self.teacher.kind() != TeacherKind::SingleScale {
            return Err(CoreError::WrongTeacher("click segmentation needs a single-scale teacher".into()).into());
        }
        let pose = pose_from(&req.pose, (DEFAULT_VIEW, DEFAULT_VIEW))?;
        let start = Instant::now();
        let features = self.features(&pose, 1)?;
        let render_ms = ms_since(start);
        let start = Instant::now();
        let result = self
            .teacher
            .decode_click(&features[0], (req.u, req.v), pose.width, pose.height)?;
        segment_response(result, render_ms, ms_since(start))
    }

    pub fn segment_prompt(&self, req: &PromptRequest) -> Result<SegmentResponse, ApiError> {
        if self.teacher.kind() != TeacherKind::MultiScale {
            return Err(CoreError::WrongTeacher("prompt segmentation needs a multi-scale teacher".into()).into());
        }
        let known = self.teacher.spec().prompt_names();
        if !known.contains(&req.prompt) {
            return Err(CoreError::UnknownPrompt {
                prompt: req.prompt.clone(),
                known,
            }
            .into());
        }
        let pose = pose_from(&req.pose, (DEFAULT_VIEW, DEFAULT_VIEW))?;
        let start = Instant::now();
        let features = self.features(&pose, self.sem.num_scales())?;
        let render_ms = ms_since(start);
        let start = Instant::now();
        let result = self
            .teacher
            .decode_prompt(&features, &req.prompt, pose.width, pose.height)?;
        segment_response(result, render_ms, ms_since(start))
    }

    pub fn project(&self, req: &ProjectRequest) -> Result<SelectionResponse, ApiError> {
        let m = self.attached()?;
        let size = (req.mask_rle.width, req.mask_rle.height);
        let pose = pose_from(&req.pose, size)?;
        if (pose.width, pose.height) != size {
            return Err(ApiError::invalid(format!(
                "pose is {}x{} but the mask is {}x{}",
                pose.width, pose.height, size.0, size.1
            )));
        }
        let mask = req.mask_rle.decode()?;
        let mut state = self.state();
        let selection = state.selection.get_or_insert_with(|| SelectionState::for_mesh(&m.mesh));
        project_mask(&m.bvh, selection, &pose, &mask)?;
        Ok(SelectionResponse {
            selected_triangle_count: selection.selected_count(),
        })
    }

    pub fn reset_selection(&self) -> Result<SelectionResponse, ApiError> {
        let mut state = self.state();
        if let Some(s) = state.selection.as_mut() {
            s.reset();
        }
        Ok(SelectionResponse {
            selected_triangle_count: 0,
        })
    }

    pub fn selected_obj(&self) -> Result<Vec<u8>, ApiError> {
        let m = self.attached()?;
        let state = self.state();
        let selection = state.selection.as_ref().ok_or(CoreError::EmptySelection)?;
        let part = extract_selected(&m.mesh, selection)?;
        let mut out = Vec::new();
        write_obj(&part, &mut out)?;
        Ok(out)
    }

    pub fn add_click(&self, req: &ClickRequest) -> Result<ClickAdded, ApiError> {
        let m = self.attached()?;
        let pose = pose_from(&req.pose, (DEFAULT_VIEW, DEFAULT_VIEW))?;
        let click = TrackedClick::new(&m.bvh, &pose, req.u, req.v)?.ok_or_else(|| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "click_missed_surface",
                format!("pixel ({}, {}) does not hit the mesh", req.u, req.v),
            )
        })?;
        let world_point = click.world_point;
        let mut state = self.state();
        state.clicks.push(click);
        Ok(ClickAdded {
            click_id: state.clicks.len() - 1,
            world_point,
        })
    }

    pub fn track_clicks(&self, pose: &PoseRecord) -> Result<ClickPositions, ApiError> {
        let m = self.attached()?;
        let pose = pose_from(pose, (DEFAULT_VIEW, DEFAULT_VIEW))?;
        let state = self.state();
        let clicks = state
            .clicks
            .iter()
            .enumerate()
            .map(|(click_id, c)| ClickPosition {
                click_id,
                view: track_click(&m.bvh, c, &pose),
            })
            .collect();
        Ok(ClickPositions { clicks })
    }
}

fn pose_from(rec: &PoseRecord, default_size: (u32, u32)) -> Result<CameraPose, ApiError> {
    let pose = CameraPose::from_record(rec, default_size)?;
    if pose.width > MAX_SIDE || pose.height > MAX_SIDE {
        return Err(ApiError::invalid(format!(
            "image size {}x{} exceeds {MAX_SIDE}",
            pose.width, pose.height
        )));
    }
    Ok(pose)
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn segment_response(result: MaskResult, render_ms: f64, decode_ms: f64) -> Result<SegmentResponse, ApiError> {
    let logits = result.logits.data();
    let n = logits.len().max(1) as f32;
    let logits_stats = LogitsStats {
        min: logits.iter().copied().fold(f32::INFINITY, f32::min),
        max: logits.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        mean: logits.iter().sum::<f32>() / n,
        positive_fraction: result.area() as f32 / n,
    };
    Ok(SegmentResponse {
        mask_rle: MaskRle::encode(result.width, result.height, &result.mask)?,
        logits_stats,
        feature_render_ms: render_ms,
        decode_ms,
    })
}

type Shared = Arc<Session>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::malformed(e.to_string()))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn session_info(State(s): State<Shared>) -> Json<SessionInfo> {
    Json(s.info())
}

async fn render(State(s): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse(&body)?;
    let png = blocking(move || s.render_png(&req)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn segment_click(State(s): State<Shared>, body: Bytes) -> Result<Json<SegmentResponse>, ApiError> {
    let req: ClickRequest = parse(&body)?;
    Ok(Json(blocking(move || s.segment_click(&req)).await?))
}

async fn segment_prompt(State(s): State<Shared>, body: Bytes) -> Result<Json<SegmentResponse>, ApiError> {
    let req: PromptRequest = parse(&body)?;
    Ok(Json(blocking(move || s.segment_prompt(&req)).await?))
}

async fn project(State(s): State<Shared>, body: Bytes) -> Result<Json<SelectionResponse>, ApiError> {
    let req: ProjectRequest = parse(&body)?;
    Ok(Json(blocking(move || s.project(&req)).await?))
}

async fn add_click(State(s): State<Shared>, body: Bytes) -> Result<Json<ClickAdded>, ApiError> {
    let req: ClickRequest = parse(&body)?;
    Ok(Json(blocking(move || s.add_click(&req)).await?))
}

#[derive(Deserialize)]
struct PoseQuery {
    /// JSON-encoded pose record.
    pose: String,
}

async fn list_clicks(
    State(s): State<Shared>,
    query: Result<Query<PoseQuery>, QueryRejection>,
) -> Result<Json<ClickPositions>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::malformed(e.body_text()))?;
    let pose: PoseRecord = parse(&Bytes::from(q.pose))?;
    Ok(Json(blocking(move || s.track_clicks(&pose)).await?))
}

async fn reset_selection(State(s): State<Shared>) -> Result<Json<SelectionResponse>, ApiError> {
    Ok(Json(s.reset_selection()?))
}

async fn selected_mesh(State(s): State<Shared>) -> Result<Response, ApiError> {
    let obj = blocking(move || s.selected_obj()).await?;
    Ok(([(header::CONTENT_TYPE, "model/obj")], obj).into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/session", get(session_info))
        .route("/render", post(render))
        .route("/segment/click", post(segment_click))
        .route("/segment/prompt", post(segment_prompt))
        .route("/project", post(project))
        .route("/clicks", post(add_click).get(list_clicks))
        .route("/selection/reset", post(reset_selection))
        .route("/mesh/selected", get(selected_mesh))
        .fallback(not_found)
        .with_state(session)
}
