//! HTTP/JSON front end for the potential engine.
//!
//! Every route sits behind `Authorization: Bearer <token>`:
//!
//! | method | path                              | body / query                                |
//! |--------|-----------------------------------|---------------------------------------------|
//! | GET    | `/api/kernels`                    |                                             |
//! | GET    | `/api/datasets`                   |                                             |
//! | GET    | `/api/datasets/{id}/stocks`       |                                             |
//! | GET    | `/api/datasets/{id}/boundaries`   |                                             |
//! | POST   | `/api/grid`                       | compute request                             |
//! | POST   | `/api/report?format=&grid=`       | compute request, or `{"key": ...}` (cache)  |

use std::collections::HashSet;
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use potsmooth::catalog::Catalog;
use potsmooth::engine::ComputeOptions;
use potsmooth::kernels::KernelKind;
use potsmooth::request::{execute, ComputeRequest, FieldError, GridResponse, RequestError};
use potsmooth::spatial_index::DEFAULT_EPSILON;
use potsmooth::wire::{render_report, ReportFormat};
use potsmooth::Error;
use serde::Serialize;
use serde_json::{json, Value};

pub const COMPUTE_TIME_HEADER: &str = "x-compute-time-ms";
pub const CACHE_HEADER: &str = "x-cache";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub catalog_dir: PathBuf,
    pub tokens: Vec<String>,
    pub timeout: Duration,
    pub default_epsilon: f64,
    /// Worker threads per computation; `None` uses every core.
    pub workers: Option<usize>,
    pub tabulation_grain: Option<usize>,
    /// Response cache capacity in requests; 0 disables it.
    pub cache_entries: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            catalog_dir: PathBuf::from("catalog"),
            tokens: Vec::new(),
            timeout: Duration::from_secs(120),
            default_epsilon: DEFAULT_EPSILON,
            workers: None,
            tabulation_grain: None,
            cache_entries: 0,
        }
    }
}

struct Cached {
    body: Bytes,
    response: GridResponse,
    compute_ms: f64,
}

struct Inner {
    catalog: Arc<Catalog>,
    tokens: HashSet<String>,
    timeout: Duration,
    default_epsilon: f64,
    compute: ComputeOptions,
    cache: Option<Mutex<LruCache<String, Arc<Cached>>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(catalog: Arc<Catalog>, config: &ServerConfig) -> Self {
        let compute = ComputeOptions {
            workers: config.workers,
            tabulation_grain: config.tabulation_grain,
            ..ComputeOptions::default()
        };
        Self(Arc::new(Inner {
            catalog,
            tokens: config.tokens.iter().cloned().collect(),
            timeout: config.timeout,
            default_epsilon: config.default_epsilon,
            compute,
            cache: NonZeroUsize::new(config.cache_entries).map(|n| Mutex::new(LruCache::new(n))),
        }))
    }

    pub fn catalog(&self) -> &Catalog {
        &self.0.catalog
    }
}

/// JSON error body: `{"error": <kind>, "message": ..., "fields": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn field(status: StatusCode, kind: &'static str, field: FieldError) -> Self {
        Self {
            status,
            kind,
            message: format!("{}: {}", field.field, field.message),
            fields: vec![field],
        }
    }

    fn invalid_field(field: &str, message: impl Into<String>) -> Self {
        Self::field(
            StatusCode::BAD_REQUEST,
            "validation",
            FieldError {
                field: field.into(),
                message: message.into(),
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body<'a> {
            error: &'a str,
            message: &'a str,
            #[serde(skip_serializing_if = "<[_]>::is_empty")]
            fields: &'a [FieldError],
        }
        let body = Body {
            error: self.kind,
            message: &self.message,
            fields: &self.fields,
        };
        let mut resp = (self.status, Json(body)).into_response();
        if self.status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        match e {
            RequestError::Invalid(fields) => Self {
                status: StatusCode::BAD_REQUEST,
                kind: "validation",
                message: RequestError::Invalid(fields.clone()).to_string(),
                fields,
            },
            RequestError::Unprocessable(f) => Self::field(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", f),
            RequestError::NotFound(f) => Self::field(StatusCode::NOT_FOUND, "not-found", f),
            RequestError::Compute(e) => e.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownDataset(_) | Error::UnknownVariable(_) => {
                Self::new(StatusCode::NOT_FOUND, "not-found", e.to_string())
            }
            Error::Cancelled => Self::new(StatusCode::SERVICE_UNAVAILABLE, "timeout", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/kernels", get(kernels))
        .route("/api/datasets", get(datasets))
        .route("/api/datasets/{id}/stocks", get(stocks))
        .route("/api/datasets/{id}/boundaries", get(boundaries))
        .route("/api/grid", post(grid))
        .route("/api/report", post(report))
        .route_layer(middleware::from_fn_with_state(state.clone(), authenticate))
        .with_state(state)
}

async fn authenticate(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match token {
        Some(t) if state.0.tokens.contains(t) => next.run(req).await,
        Some(_) => ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "invalid token").into_response(),
        None => ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing bearer token").into_response(),
    }
}

/// Parameter schemas for every kernel family, as served by `/api/kernels`.
pub fn kernel_listing() -> Value {
    let portee = json!({
        "name": "portee_km",
        "type": "number",
        "unit": "km",
        "required": true,
        "exclusive_minimum": 0,
        "description": "mean range: the kernel-weighted average distance"
    });
    let list: Vec<Value> = KernelKind::ALL
        .iter()
        .map(|kind| {
            let mut params = vec![portee.clone()];
            if *kind == KernelKind::Pareto {
                params.push(json!({
                    "name": "beta",
                    "type": "number",
                    "required": false,
                    "default": potsmooth::kernels::DEFAULT_PARETO_BETA,
                    "exclusive_minimum": 3,
                    "description": "tail exponent"
                }));
            }
            json!({"name": kind.name(), "description": kind.description(), "params": params})
        })
        .collect();
    Value::Array(list)
}

async fn kernels() -> Json<Value> {
    Json(kernel_listing())
}

async fn datasets(State(state): State<AppState>) -> Response {
    Json(state.catalog().list_datasets()).into_response()
}

async fn stocks(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(state.catalog().list_stocks(&id)?).into_response())
}

async fn boundaries(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let catalog = state.0.catalog.clone();
    let found = tokio::task::spawn_blocking(move || catalog.boundaries(&id).map(|b| (id, b)))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    match found {
        (_, Some(geojson)) => Ok(([(header::CONTENT_TYPE, "application/geo+json")], Json(geojson)).into_response()),
        (id, None) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not-found",
            format!("dataset `{id}` has no boundaries"),
        )),
    }
}

fn parse_body(body: &[u8]) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid_field("", format!("malformed JSON: {e}")))
}

/// Looks up or computes the response for `request`, honouring the timeout.
async fn run(state: &AppState, request: ComputeRequest) -> Result<(Arc<Cached>, bool), ApiError> {
    let key = request.cache_key();
    if let Some(cache) = &state.0.cache {
        if let Some(hit) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok((hit.clone(), true));
        }
    }
    let cancel = Arc::new(AtomicBool::new(false));
    let mut opts = state.0.compute.clone();
    opts.cancel = Some(cancel.clone());
    let catalog = state.0.catalog.clone();
    let job = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let computation = execute(&request, &catalog, &opts)?;
        let response = computation.response();
        Ok::<_, RequestError>(Cached {
            body: Bytes::from(response.to_bytes()),
            response,
            compute_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    });
    let outcome = match tokio::time::timeout(state.0.timeout, job).await {
        Ok(joined) => joined.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?,
        Err(_) => {
            cancel.store(true, Ordering::Relaxed);
            return Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "timeout",
                format!("computation exceeded {} s", state.0.timeout.as_secs_f64()),
            ));
        }
    };
    let cached = Arc::new(outcome?);
    if let Some(cache) = &state.0.cache {
        cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .put(key, cached.clone());
    }
    Ok((cached, false))
}

fn timing_headers(state: &AppState, cached: &Cached, hit: bool) -> HeaderMap {
    let mut headers = HeaderMap::new();
    let ms = format!("{:.3}", if hit { 0.0 } else { cached.compute_ms });
    headers.insert(COMPUTE_TIME_HEADER, HeaderValue::from_str(&ms).expect("ascii"));
    if state.0.cache.is_some() {
        headers.insert(CACHE_HEADER, HeaderValue::from_static(if hit { "hit" } else { "miss" }));
    }
    headers
}

async fn grid(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let value = parse_body(&body)?;
    let request = ComputeRequest::from_json_with(&value, state.0.default_epsilon)?;
    let (cached, hit) = run(&state, request).await?;
    let mut headers = timing_headers(&state, &cached, hit);
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    Ok((headers, cached.body.clone()).into_response())
}

async fn report(
    State(state): State<AppState>,
    Query(query): Query<Vec<(String, String)>>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let mut format = ReportFormat::Text;
    let mut index = 0usize;
    for (name, value) in &query {
        match name.as_str() {
            "format" => {
                format = match value.as_str() {
                    "text" => ReportFormat::Text,
                    "html" => ReportFormat::Html,
                    _ => return Err(ApiError::invalid_field("format", "expected `text` or `html`")),
                }
            }
            "grid" => {
                index = value
                    .parse()
                    .map_err(|_| ApiError::invalid_field("grid", "expected a grid index"))?
            }
            other => return Err(ApiError::invalid_field(other, "unknown query parameter")),
        }
    }

    let value = parse_body(&body)?;
    let reference = value
        .as_object()
        .filter(|o| o.len() == 1)
        .and_then(|o| o.get("key"))
        .cloned();
    let (cached, hit) = match reference {
        Some(key) => {
            let key = key
                .as_str()
                .ok_or_else(|| ApiError::invalid_field("key", "expected a string"))?;
            let Some(cache) = &state.0.cache else {
                return Err(ApiError::new(
                    StatusCode::NOT_FOUND,
                    "not-found",
                    "grid references need the server cache, which is disabled",
                ));
            };
            let hit = cache.lock().unwrap_or_else(|e| e.into_inner()).get(key).cloned();
            let hit = hit.ok_or_else(|| {
                ApiError::field(
                    StatusCode::NOT_FOUND,
                    "not-found",
                    FieldError {
                        field: "key".into(),
                        message: format!("no cached grid `{key}`"),
                    },
                )
            })?;
            (hit, true)
        }
        None => {
            let request = ComputeRequest::from_json_with(&value, state.0.default_epsilon)?;
            run(&state, request).await?
        }
    };
    let entry = cached.response.grids.get(index).ok_or_else(|| {
        ApiError::invalid_field(
            "grid",
            format!("index {index} out of range, response holds {} grids", cached.response.grids.len()),
        )
    })?;
    let text = render_report(&entry.payload, format)?;
    let mut headers = timing_headers(&state, &cached, hit);
    let content_type = match format {
        ReportFormat::Text => "text/plain; charset=utf-8",
        ReportFormat::Html => "text/html; charset=utf-8",
    };
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    Ok((headers, text).into_response())
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Opens the catalog, binds `config.listen` and serves until Ctrl-C.
pub async fn serve(config: ServerConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    if config.tokens.is_empty() {
        return Err("at least one bearer token is required".into());
    }
    let catalog = Arc::new(Catalog::open(&config.catalog_dir)?);
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    let state = AppState::new(catalog, &config);
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
