//! HTTP generation service over a directory of trained models.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use crate::checkpoint::read_meta;
use crate::error::{Error, Result};
use crate::generator::{GenerateMode, Pipeline, DECODER_CKPT, GENERATOR_CKPT, MOTION_CKPT};
use crate::tracks::BoxTrackSet;
use crate::video::{decode_png, encode_png, VideoTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub trained_steps: usize,
    /// `decoder` for a stage-1 model, `generator` after adversarial training.
    pub stage: String,
}

struct LoadedModel {
    info: ModelInfo,
    pipeline: Mutex<Pipeline>,
}

/// Models found under a directory, keyed by id. Immutable once built.
#[derive(Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<LoadedModel>>,
}

fn is_model_dir(dir: &Path) -> bool {
    dir.join(format!("{MOTION_CKPT}.json")).exists()
}

fn load_model(dir: &Path, id: &str) -> Result<LoadedModel> {
    // Parse every sidecar up front so a malformed one excludes the model.
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") && path.with_extension("ckpt").exists() {
            read_meta(&path)?;
        }
    }
    let pipeline = Pipeline::load(dir)?;
    let s = pipeline.shape();
    let stage = if dir.join(format!("{GENERATOR_CKPT}.json")).exists() {
        GENERATOR_CKPT
    } else {
        DECODER_CKPT
    };
    Ok(LoadedModel {
        info: ModelInfo {
            model_id: id.to_string(),
            n: s.n,
            h: s.h,
            w: s.w,
            trained_steps: pipeline.generator.steps_trained(),
            stage: stage.to_string(),
        },
        pipeline: Mutex::new(pipeline),
    })
}

impl Registry {
    /// Every subdirectory holding a model (and `dir` itself if it holds one).
    /// Unloadable models are skipped with a warning.
    pub fn scan(dir: &Path) -> Result<Self> {
        let mut candidates: Vec<(String, PathBuf)> = Vec::new();
        if !dir.is_dir() {
            return Err(Error::Missing {
                path: dir.to_path_buf(),
                hint: "models directory does not exist".into(),
            });
        }
        if is_model_dir(dir) {
            let id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "default".into());
            candidates.push((id, dir.to_path_buf()));
        }
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() && is_model_dir(&path) {
                let id = path.file_name().unwrap().to_string_lossy().into_owned();
                candidates.push((id, path));
            }
        }
        let mut models = BTreeMap::new();
        for (id, path) in candidates {
            match load_model(&path, &id) {
                Ok(m) => {
                    tracing::info!(model_id = %id, "loaded model");
                    models.insert(id, Arc::new(m));
                }
                Err(e) => tracing::warn!(model_id = %id, error = %e, "skipping model"),
            }
        }
        Ok(Self { models })
    }

    pub fn from_pipelines(pipelines: Vec<(String, Pipeline)>) -> Self {
        let models = pipelines
            .into_iter()
            .map(|(id, p)| {
                let s = p.shape();
                let info = ModelInfo {
                    model_id: id.clone(),
                    n: s.n,
                    h: s.h,
                    w: s.w,
                    trained_steps: p.generator.steps_trained(),
                    stage: p.generator.stage().to_string(),
                };
                (
                    id,
                    Arc::new(LoadedModel {
                        info,
                        pipeline: Mutex::new(p),
                    }),
                )
            })
            .collect();
        Self { models }
    }

    pub fn models(&self) -> Vec<ModelInfo> {
        self.models.values().map(|m| m.info.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// A validated generation request.
#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub mode: GenerateMode,
    pub content: Option<ndarray::Array3<f32>>,
    pub tracks: Option<BoxTrackSet>,
    pub seed: u64,
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMeta {
    pub model_id: String,
    pub seed: u64,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub frames: Vec<String>,
    pub meta: ResponseMeta,
}

/// Field name to message.
pub type FieldErrors = BTreeMap<String, String>;

/// Parse and check a request body against a model's shape.
pub fn parse_request(body: &Value, shape: Option<(usize, usize, usize)>) -> std::result::Result<GenerateRequest, FieldErrors> {
    let mut errors = FieldErrors::new();
    let Some(obj) = body.as_object() else {
        errors.insert("body".into(), "expected a JSON object".into());
        return Err(errors);
    };
    let mode = match obj.get("mode").and_then(Value::as_str) {
        Some("controlled") => Some(GenerateMode::Controlled),
        Some("unconditional") => Some(GenerateMode::Unconditional),
        Some(other) => {
            errors.insert("mode".into(), format!("unknown mode {other:?}"));
            None
        }
        None => {
            errors.insert("mode".into(), "required: \"controlled\" or \"unconditional\"".into());
            None
        }
    };
    let seed = match obj.get("seed") {
        Some(v) => match v.as_u64() {
            Some(s) => Some(s),
            None => {
                errors.insert("seed".into(), "must be a non-negative integer".into());
                None
            }
        },
        None => {
            errors.insert("seed".into(), "required".into());
            None
        }
    };
    let model_id = match obj.get("model_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            errors.insert("model_id".into(), "must be a string".into());
            None
        }
    };
    let mut content = None;
    let mut tracks = None;
    if mode == Some(GenerateMode::Controlled) {
        match obj.get("content_image").and_then(Value::as_str) {
            None => {
                errors.insert("content_image".into(), "required in controlled mode".into());
            }
            Some(b64) => match B64.decode(b64.trim()) {
                Err(e) => {
                    errors.insert("content_image".into(), format!("invalid base64: {e}"));
                }
                Ok(bytes) => match decode_png(&bytes, Some(3)) {
                    Err(e) => {
                        errors.insert("content_image".into(), format!("invalid PNG: {e}"));
                    }
                    Ok(img) => {
                        if let Some((_, h, w)) = shape {
                            if img.dim() != (h, w, 3) {
                                errors.insert(
                                    "content_image".into(),
                                    format!("image is {}x{}, model expects {w}x{h}", img.dim().1, img.dim().0),
                                );
                            }
                        }
                        content = Some(img);
                    }
                },
            },
        }
        match obj.get("tracks") {
            None | Some(Value::Null) => {
                errors.insert("tracks".into(), "required in controlled mode".into());
            }
            Some(v) => match serde_json::from_value::<BoxTrackSet>(v.clone()) {
                Err(e) => {
                    errors.insert("tracks".into(), format!("malformed: {e}"));
                }
                Ok(t) => {
                    if let Some((n, h, w)) = shape {
                        if t.num_frames != n {
                            errors.insert(
                                "tracks.num_frames".into(),
                                format!("num_frames {} does not match model n {n}", t.num_frames),
                            );
                        }
                        if (t.width, t.height) != (w, h) {
                            errors.insert(
                                "tracks.width".into(),
                                format!("tracks are {}x{}, model expects {w}x{h}", t.width, t.height),
                            );
                        }
                    }
                    if let Err(e) = t.validate() {
                        errors.entry("tracks".into()).or_insert_with(|| e.to_string());
                    }
                    tracks = Some(t);
                }
            },
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(GenerateRequest {
        mode: mode.unwrap(),
        content,
        tracks,
        seed: seed.unwrap(),
        model_id,
    })
}

/// Run a validated request against a pipeline.
pub fn run_request(pipeline: &Pipeline, req: &GenerateRequest) -> Result<VideoTensor> {
    pipeline.generate(req.mode, req.content.as_ref().map(|c| c.view()), req.tracks.as_ref(), req.seed)
}

pub fn encode_frames(v: &VideoTensor) -> Result<Vec<Vec<u8>>> {
    (0..v.shape().n).map(|t| encode_png(v.frame(t))).collect()
}

pub fn frames_zip(pngs: &[Vec<u8>], meta: &ResponseMeta) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut zip = zip::ZipWriter::new(&mut buf);
        let opts = zip::write::SimpleFileOptions::default();
        let zerr = |e: zip::result::ZipError| Error::Validation(format!("zip: {e}"));
        for (i, png) in pngs.iter().enumerate() {
            zip.start_file(crate::video::frame_file_name(i), opts).map_err(zerr)?;
            zip.write_all(png).map_err(|e| Error::io(Path::new("archive"), e))?;
        }
        zip.start_file("meta.json", opts).map_err(zerr)?;
        zip.write_all(&serde_json::to_vec_pretty(meta)?)
            .map_err(|e| Error::io(Path::new("archive"), e))?;
        zip.finish().map_err(zerr)?;
    }
    Ok(buf.into_inner())
}

#[derive(Clone)]
pub struct AppState {
    registry: Arc<Registry>,
}

impl AppState {
    pub fn new(registry: Registry) -> Self {
        Self {
            registry: Arc::new(registry),
        }
    }
}

fn error_response(status: StatusCode, kind: &str, message: String, fields: Option<FieldErrors>) -> Response {
    let mut body = json!({ "error": kind, "message": message });
    if let Some(f) = fields {
        body["fields"] = json!(f);
    }
    (status, Json(body)).into_response()
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "model_loaded": !state.registry.is_empty() }))
}

async fn models(State(state): State<AppState>) -> Json<Vec<ModelInfo>> {
    Json(state.registry.models())
}

#[derive(Debug, Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn generate(State(state): State<AppState>, Query(q): Query<FormatQuery>, body: Bytes) -> Response {
    let started = Instant::now();
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "validation", format!("invalid JSON: {e}"), None),
    };
    let zip = match q.format.as_deref() {
        None | Some("json") => false,
        Some("zip") => true,
        Some(other) => {
            return error_response(
                StatusCode::BAD_REQUEST,
                "validation",
                format!("unknown format {other:?}"),
                None,
            )
        }
    };
    if state.registry.is_empty() {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "no model loaded".into(), None);
    }
    let requested = value.get("model_id").and_then(Value::as_str).map(str::to_string);
    let model = match &requested {
        Some(id) => match state.registry.models.get(id) {
            Some(m) => m.clone(),
            None => {
                return error_response(StatusCode::NOT_FOUND, "not_found", format!("unknown model_id {id:?}"), None)
            }
        },
        None => state.registry.models.values().next().unwrap().clone(),
    };
    let i = &model.info;
    let req = match parse_request(&value, Some((i.n, i.h, i.w))) {
        Ok(r) => r,
        Err(fields) => {
            let message = fields
                .iter()
                .map(|(k, v)| format!("{k}: {v}"))
                .collect::<Vec<_>>()
                .join("; ");
            return error_response(StatusCode::BAD_REQUEST, "validation", message, Some(fields));
        }
    };
    let job = model.clone();
    let result = tokio::task::spawn_blocking(move || {
        let pipeline = job.pipeline.lock().unwrap_or_else(|p| p.into_inner());
        run_request(&pipeline, &req).and_then(|v| encode_frames(&v))
    })
    .await;
    let pngs = match result {
        Ok(Ok(p)) => p,
        Ok(Err(e)) if e.is_validation() => {
            return error_response(StatusCode::BAD_REQUEST, "validation", e.to_string(), None)
        }
        Ok(Err(e)) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), None),
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), None),
    };
    let meta = ResponseMeta {
        model_id: model.info.model_id.clone(),
        seed: value.get("seed").and_then(Value::as_u64).unwrap_or(0),
        n: model.info.n,
        h: model.info.h,
        w: model.info.w,
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    if zip {
        return match frames_zip(&pngs, &meta) {
            Ok(bytes) => ([(header::CONTENT_TYPE, "application/zip")], bytes).into_response(),
            Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), None),
        };
    }
    Json(GenerateResponse {
        frames: pngs.iter().map(|p| B64.encode(p)).collect(),
        meta,
    })
    .into_response()
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any);
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/models", get(models))
        .route("/api/v1/generate", post(generate))
        .layer(cors)
        .with_state(state)
}

/// Bind and serve until ctrl-c.
pub async fn serve(models_dir: &Path, host: &str, port: u16) -> Result<()> {
    let registry = Registry::scan(models_dir)?;
    if registry.is_empty() {
        tracing::warn!(dir = %models_dir.display(), "no models found; generate requests will return 503");
    }
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Error::Validation(format!("bad address {host}:{port}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(Path::new(&addr.to_string()), e))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(AppState::new(registry)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(Path::new(&addr.to_string()), e))
}
