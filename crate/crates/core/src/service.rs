//! HTTP retrieval and chat service over a trained bundle.
//!
//! The state is built once and never mutated; until it is installed every
//! endpoint answers 503. Query embeddings come from the `<ret>` pipeline, and
//! ranking is the index's exact search, so the service returns exactly what
//! the evaluation harness would.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::corpus::{Raster, StickerRecord};
use crate::error::{Error, Result};
use crate::models::{extract_ret_embedding, ModelBundle};
use crate::retrieval::{ret_query_embedding, QueryKind, RetQuery, RetrievalIndex, TOOL_MAX_NEW};
use crate::text::{Special, TemplateSet, Tokenizer, LM_CONTEXT};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_MAX_K: usize = 50;
pub const DEFAULT_K: usize = 10;

/// Listener and request limits. Loaded from a JSON or `key=value` file, then
/// overridden by `STICKER_PORT` and `STICKER_DATA`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub max_k: usize,
    /// Root of a saved corpus (`manifest.json`, `index.jsonl`, `frames/`).
    pub data_root: PathBuf,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
    /// Put `<pret>` in front of chat prompts.
    pub chat_prefix: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            max_k: DEFAULT_MAX_K,
            data_root: PathBuf::from("data"),
            cors_origin: None,
            chat_prefix: true,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// JSON object, or one `key=value` per line (`#` starts a comment).
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return Ok(serde_json::from_str(text)?);
        }
        let mut map = serde_json::Map::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value", n + 1)))?;
            let v = v.trim();
            let value = match k.trim() {
                "port" | "max_k" => json!(v
                    .parse::<u64>()
                    .map_err(|_| Error::invalid(format!("config line {}: {v:?} is not a number", n + 1)))?),
                "chat_prefix" => json!(v
                    .parse::<bool>()
                    .map_err(|_| Error::invalid(format!("config line {}: {v:?} is not a boolean", n + 1)))?),
                _ => json!(v),
            };
            map.insert(k.trim().to_string(), value);
        }
        Ok(serde_json::from_value(serde_json::Value::Object(map))?)
    }

    /// Applies `STICKER_PORT` and `STICKER_DATA`.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(p) = std::env::var("STICKER_PORT") {
            self.port = p
                .parse()
                .map_err(|_| Error::invalid(format!("STICKER_PORT {p:?} is not a port number")))?;
        }
        if let Ok(d) = std::env::var("STICKER_DATA") {
            self.data_root = PathBuf::from(d);
        }
        Ok(self)
    }
}

/// Everything a request needs, immutable after construction.
pub struct ServiceState {
    pub bundle: ModelBundle<f32>,
    pub tok: Tokenizer,
    pub templates: TemplateSet,
    pub index: RetrievalIndex,
    pub records: BTreeMap<u32, StickerRecord>,
    pub config: ServiceConfig,
    pub checkpoint_digest: String,
}

impl ServiceState {
    /// Refuses an index built by another vision encoder, a bundle without
    /// retrieval tokens, or index rows with no record behind them.
    pub fn new(
        bundle: ModelBundle<f32>,
        tok: Tokenizer,
        templates: TemplateSet,
        index: RetrievalIndex,
        records: impl IntoIterator<Item = StickerRecord>,
        config: ServiceConfig,
        checkpoint_digest: String,
    ) -> Result<Self> {
        index.check_fingerprint(&bundle.vision_fingerprint())?;
        if !bundle.lm.is_extended() {
            return Err(Error::InvalidState("checkpoint has no retrieval tokens; train the language model first".into()));
        }
        let records: BTreeMap<u32, StickerRecord> = records.into_iter().map(|r| (r.id, r)).collect();
        if let Some(id) = index.ids.iter().find(|id| !records.contains_key(id)) {
            return Err(Error::invalid(format!("index row {id} has no record in the corpus")));
        }
        Ok(ServiceState {
            bundle,
            tok,
            templates,
            index,
            records,
            config,
            checkpoint_digest,
        })
    }

    fn frame_urls(&self, record: &StickerRecord) -> Vec<String> {
        (0..record.frames.len()).map(|k| format!("/frames/{}_{k}.png", record.id)).collect()
    }

    fn image_embedding(&self, image: &ImageInput) -> Result<Vec<f32>, ApiError> {
        match image {
            ImageInput::Id(id) => {
                let r = self
                    .records
                    .get(id)
                    .ok_or_else(|| ApiError::not_found(format!("unknown sticker id {id}")))?;
                Ok(self.bundle.vision.encode_record(r)?)
            }
            ImageInput::Png(raster) => Ok(self.bundle.vision.encode_frames([raster, raster, raster])?),
        }
    }

    fn results(&self, query: &[f32], k: usize, kind: QueryKind) -> Result<SearchResponse, ApiError> {
        let found = self.index.search(query, k, kind)?;
        let results = found
            .hits
            .iter()
            .map(|h| {
                let r = &self.records[&h.id];
                SearchHit {
                    id: h.id,
                    score: round6(h.score),
                    frame_urls: self.frame_urls(r),
                    description: r.description.clone(),
                }
            })
            .collect();
        Ok(SearchResponse {
            results,
            query_kind: kind,
        })
    }

    /// Runs a `/search` request.
    pub fn search(&self, req: &SearchRequest) -> Result<SearchResponse, ApiError> {
        let k = req.k.unwrap_or(DEFAULT_K);
        if k == 0 || k > self.config.max_k {
            return Err(ApiError::bad_request(format!("k must be between 1 and {}", self.config.max_k)));
        }
        let text = req.text.as_deref().map(str::trim).filter(|t| !t.is_empty());
        let image = match (req.image_id, req.image_b64.as_deref()) {
            (Some(_), Some(_)) => return Err(ApiError::bad_request("give image_id or image_b64, not both")),
            (Some(id), None) => Some(ImageInput::Id(id)),
            (None, Some(b64)) => Some(ImageInput::Png(decode_png(b64)?)),
            (None, None) => None,
        };
        let kind = match (text.is_some(), image.is_some()) {
            (true, false) => QueryKind::Text,
            (false, true) => QueryKind::Image,
            (true, true) => QueryKind::ImageText,
            (false, false) => return Err(ApiError::bad_request("a query needs text, an image, or both")),
        };
        let image_emb = image.as_ref().map(|i| self.image_embedding(i)).transpose()?;
        let q = RetQuery {
            mode: kind.mode(),
            text,
            image: image_emb.as_deref(),
        };
        let emb = ret_query_embedding(&self.bundle, &self.tok, &self.templates, &q)?;
        self.results(&emb, k, kind)
    }

    /// Runs a `/chat` request: greedy decoding, and a search driven by the
    /// `<ret>` state when the model emits it.
    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ApiError> {
        let message = req.message.trim();
        if message.is_empty() {
            return Err(ApiError::bad_request("message is empty"));
        }
        let tok = &self.tok;
        let mut prompt = Vec::new();
        if self.config.chat_prefix {
            prompt.push(tok.special(Special::Pret));
        }
        prompt.push(tok.bos_id());
        let image_emb = match req.image_id {
            Some(id) => {
                prompt.push(tok.special(Special::Img));
                prompt.push(tok.slot_id());
                prompt.push(tok.special(Special::ImgEnd));
                prompt.extend(tok.encode(" "));
                Some(self.image_embedding(&ImageInput::Id(id))?)
            }
            None => None,
        };
        let slot = image_emb.as_ref().map(|_| prompt.iter().position(|&t| t == tok.slot_id()).expect("slot pushed"));
        // User text goes through plain encoding, which never yields special ids.
        prompt.extend(tok.encode(message));
        prompt.push(tok.sep_id());
        if prompt.len() + 1 > LM_CONTEXT {
            return Err(ApiError::bad_request(format!("message too long for the {LM_CONTEXT}-token context")));
        }
        let lm = &self.bundle.lm;
        let proj = Some(&self.bundle.proj);
        let ret = tok.special(Special::Ret);
        let out = lm.greedy_decode(&prompt, image_emb.as_deref(), slot, proj, TOOL_MAX_NEW, tok.eos_id(), &[ret])?;
        let used_tool = out.last() == Some(&ret);
        let results = if used_tool {
            let seq: Vec<u32> = prompt.iter().chain(&out).copied().collect();
            let (_, hiddens) = lm.forward(&seq, image_emb.as_deref(), slot, proj)?;
            let emb = extract_ret_embedding(&hiddens, seq.len() - 1, self.bundle.proj.w_t())?;
            let kind = if image_emb.is_some() { QueryKind::ImageText } else { QueryKind::Text };
            Some(self.results(&emb, DEFAULT_K.min(self.config.max_k), kind)?.results)
        } else {
            None
        };
        Ok(ChatResponse {
            reply: tok.decode_plain(&out).trim().to_string(),
            used_tool,
            results,
        })
    }

    pub fn sticker(&self, id: u32) -> Result<StickerInfo, ApiError> {
        let r = self
            .records
            .get(&id)
            .ok_or_else(|| ApiError::not_found(format!("unknown sticker id {id}")))?;
        Ok(StickerInfo {
            id,
            description: r.description.clone(),
            ocr_text: r.ocr_text.clone(),
            emotions: r.emotions.iter().map(|e| e.name()).collect(),
            style: r.style.name().to_string(),
            animated: r.is_animated(),
            indexed: self.index.position(id).is_some(),
            frame_urls: self.frame_urls(r),
        })
    }

    /// PNG bytes for `"<id>_<frame>.png"`.
    pub fn frame_png(&self, file: &str) -> Result<Vec<u8>, ApiError> {
        let missing = || ApiError::not_found(format!("no frame {file:?}"));
        let stem = file.strip_suffix(".png").ok_or_else(missing)?;
        let (id, k) = stem.split_once('_').ok_or_else(missing)?;
        let id: u32 = id.parse().map_err(|_| missing())?;
        let k: usize = k.parse().map_err(|_| missing())?;
        let frame = self.records.get(&id).and_then(|r| r.frames.get(k)).ok_or_else(missing)?;
        Ok(frame.to_png()?)
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            checkpoint_digest: Some(self.checkpoint_digest.clone()),
            index_size: self.index.len(),
        }
    }
}

enum ImageInput {
    Id(u32),
    Png(Raster),
}

fn decode_png(b64: &str) -> Result<Raster, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::unprocessable(format!("image_b64 is not base64: {e}")))?;
    Raster::from_png(&bytes).map_err(|e| ApiError::unprocessable(format!("image_b64 is not a decodable PNG: {e}")))
}

/// Six decimal places, so equal rankings serialize to equal bytes.
pub fn round6(x: f32) -> f64 {
    (f64::from(x) * 1e6).round() / 1e6
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub text: Option<String>,
    pub image_id: Option<u32>,
    pub image_b64: Option<String>,
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: u32,
    pub score: f64,
    pub frame_urls: Vec<String>,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<SearchHit>,
    pub query_kind: QueryKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub message: String,
    pub image_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub reply: String,
    pub used_tool: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<Vec<SearchHit>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StickerInfo {
    pub id: u32,
    pub description: String,
    pub ocr_text: String,
    pub emotions: Vec<String>,
    pub style: String,
    pub animated: bool,
    pub indexed: bool,
    pub frame_urls: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_digest: Option<String>,
    pub index_size: usize,
}

/// An error response: status code plus `{"error": message}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: m.into(),
        }
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: m.into(),
        }
    }

    pub fn unprocessable(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: m.into(),
        }
    }

    fn loading() -> Self {
        ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: "model is still loading".into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) | Error::ContextOverflow { .. } | Error::Shape(_) => StatusCode::BAD_REQUEST,
            Error::Image(_) | Error::DegenerateEmbedding { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

/// Shared slot the loaded state is installed into.
pub type StateSlot = Arc<OnceLock<Arc<ServiceState>>>;

fn loaded(slot: &StateSlot) -> Result<Arc<ServiceState>, ApiError> {
    slot.get().cloned().ok_or_else(ApiError::loading)
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

/// Runs a model call off the async executor.
async fn blocking<R: Send + 'static>(
    f: impl FnOnce() -> Result<R, ApiError> + Send + 'static,
) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::from(Error::InvalidState(format!("request task failed: {e}"))))?
}

async fn search_handler(State(slot): State<StateSlot>, body: Bytes) -> Result<Json<SearchResponse>, ApiError> {
    let state = loaded(&slot)?;
    let req: SearchRequest = parse_body(&body)?;
    blocking(move || state.search(&req)).await.map(Json)
}

async fn chat_handler(State(slot): State<StateSlot>, body: Bytes) -> Result<Json<ChatResponse>, ApiError> {
    let state = loaded(&slot)?;
    let req: ChatRequest = parse_body(&body)?;
    blocking(move || state.chat(&req)).await.map(Json)
}

async fn sticker_handler(
    State(slot): State<StateSlot>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<StickerInfo>, ApiError> {
    let state = loaded(&slot)?;
    let id: u32 = id
        .parse()
        .map_err(|_| ApiError::bad_request(format!("sticker id {id:?} is not a number")))?;
    state.sticker(id).map(Json)
}

async fn frame_handler(State(slot): State<StateSlot>, UrlPath(file): UrlPath<String>) -> Result<Response, ApiError> {
    let state = loaded(&slot)?;
    let png = state.frame_png(&file)?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], png).into_response())
}

async fn health_handler(State(slot): State<StateSlot>) -> Response {
    match slot.get() {
        Some(state) => Json(state.health()).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "loading".into(),
                checkpoint_digest: None,
                index_size: 0,
            }),
        )
            .into_response(),
    }
}

/// The API routes over `slot`, with CORS for `cors_origin` (any origin when
/// `None`).
pub fn router(slot: StateSlot, cors_origin: Option<&str>) -> Result<Router> {
    let origin = match cors_origin {
        None | Some("*") => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(
            HeaderValue::from_str(o).map_err(|_| Error::invalid(format!("bad CORS origin {o:?}")))?,
        ),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Ok(Router::new()
        .route("/search", post(search_handler))
        .route("/chat", post(chat_handler))
        .route("/sticker/{id}", get(sticker_handler))
        .route("/frames/{file}", get(frame_handler))
        .route("/health", get(health_handler))
        .layer(cors)
        .with_state(slot))
}

/// Binds the listener, answers 503 while `load` runs, then serves the loaded
/// state until Ctrl-C. A failed load stops the server and returns the error.
pub async fn serve(config: ServiceConfig, load: impl FnOnce() -> Result<ServiceState> + Send + 'static) -> Result<()> {
    let addr = format!("{}:{}", config.bind, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| Error::io(PathBuf::from(&addr), e))?;
    let slot: StateSlot = Arc::new(OnceLock::new());
    let app = router(slot.clone(), config.cors_origin.as_deref())?;
    log::info!("listening on http://{addr}");
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                tokio::select! {
                    _ = stop_rx => {}
                    _ = tokio::signal::ctrl_c() => {}
                }
            })
            .await
    });
    let loaded = tokio::task::spawn_blocking(load)
        .await
        .map_err(|e| Error::InvalidState(format!("loader task failed: {e}")))?;
    match loaded {
        Ok(state) => {
            log::info!("loaded checkpoint {}, {} indexed stickers", state.checkpoint_digest, state.index.len());
            let _ = slot.set(Arc::new(state));
        }
        Err(e) => {
            let _ = stop_tx.send(());
            let _ = server.await;
            return Err(e);
        }
    }
    server
        .await
        .map_err(|e| Error::InvalidState(format!("server task failed: {e}")))?
        .map_err(|e| Error::io(PathBuf::from(addr), e))
}
