//! HTTP service for keep/reject review of a benchmark candidate pool.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/subsets` | subset names |
//! | GET | `/subsets/{type}/candidates?offset&limit&include_rejected` | one page |
//! | GET | `/images/{image_id}` | image file, or a placeholder with `x-placeholder: true` |
//! | POST | `/decisions` | `{candidate_id, action, reviewer?, timestamp?}` |
//! | GET | `/progress` | per-subset counts |
//! | POST | `/finalize` | `{n_per_subset, n_positive?, seed}` |
//!
//! Decisions are appended to the pool's decision log before the response
//! is sent. Reads go to an immutable snapshot that is replaced after each
//! write.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use relqa_core::bench::{default_positive_count, select_benchmark, BenchError, GtLabel, Subset};
use relqa_core::review::{ReviewAction, ReviewDecision, ReviewError, ReviewSnapshot, ReviewStatus, ReviewStore};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_PAGE_SIZE: usize = 50;
const IMAGE_EXTENSIONS: [(&str, &str); 4] = [
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("png", "image/png"),
    ("webp", "image/webp"),
];
const PLACEHOLDER_SVG: &str = r##"<svg xmlns="http://www.w3.org/2000/svg" width="64" height="48"><rect width="64" height="48" fill="#ccc"/><text x="32" y="28" font-size="10" text-anchor="middle" fill="#666">no image</text></svg>"##;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("binding {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("server: {0}")]
    Serve(#[source] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub pool_path: PathBuf,
    pub images_root: PathBuf,
    /// Where `POST /finalize` writes the benchmark.
    pub benchmark_path: PathBuf,
    pub bench_name: String,
    /// Allowed CORS origin; any origin when `None`.
    pub cors_origin: Option<String>,
}

pub struct AppState {
    store: Mutex<ReviewStore>,
    snapshot: RwLock<Arc<ReviewSnapshot>>,
    cfg: ServiceConfig,
}

impl AppState {
    /// Opens the pool and replays its decision log.
    pub fn open(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        let store = ReviewStore::open(&cfg.pool_path)?;
        let snapshot = RwLock::new(Arc::new(store.snapshot().clone()));
        Ok(Self {
            store: Mutex::new(store),
            snapshot,
            cfg,
        })
    }

    fn snapshot(&self) -> Arc<ReviewSnapshot> {
        self.snapshot.read().unwrap().clone()
    }
}

struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": error, "message": message.into()}),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn parse_subset(name: &str) -> Result<Subset, ApiError> {
    name.parse::<Subset>()
        .ok()
        .filter(|s| Subset::REVIEW.contains(s))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_subset", format!("no subset {name:?}")))
}

async fn subsets() -> Json<Vec<&'static str>> {
    Json(Subset::REVIEW.iter().map(|s| s.as_str()).collect())
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
    include_rejected: Option<bool>,
}

#[derive(Debug, Serialize)]
struct CandidateView {
    candidate_id: String,
    image_id: String,
    question: String,
    answer: String,
    gt_label: GtLabel,
    status: ReviewStatus,
    image_url: String,
}

async fn candidates(
    State(state): State<Arc<AppState>>,
    UrlPath(subset): UrlPath<String>,
    Query(q): Query<PageQuery>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let subset = parse_subset(&subset)?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_SIZE);
    let (total, page) = state
        .snapshot()
        .page(subset, offset, limit, q.include_rejected.unwrap_or(false));
    let views: Vec<CandidateView> = page
        .into_iter()
        .map(|c| CandidateView {
            image_url: format!("/images/{}", c.image_id),
            candidate_id: c.candidate_id,
            image_id: c.image_id,
            question: c.question,
            answer: c.answer,
            gt_label: c.gt_label,
            status: c.review_status,
        })
        .collect();
    Ok(Json(json!({
        "subset": subset,
        "total": total,
        "offset": offset,
        "limit": limit,
        "candidates": views,
    })))
}

fn safe_image_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.contains("..")
}

fn find_image(root: &Path, id: &str) -> Option<(PathBuf, &'static str)> {
    IMAGE_EXTENSIONS.iter().find_map(|(ext, mime)| {
        let p = root.join(format!("{id}.{ext}"));
        p.is_file().then_some((p, *mime))
    })
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    if safe_image_id(&id) {
        if let Some((path, mime)) = find_image(&state.cfg.images_root, &id) {
            if let Ok(bytes) = tokio::fs::read(&path).await {
                return ([(header::CONTENT_TYPE, mime)], bytes).into_response();
            }
        }
    }
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/svg+xml")),
            (header::HeaderName::from_static("x-placeholder"), HeaderValue::from_static("true")),
        ],
        PLACEHOLDER_SVG,
    )
        .into_response()
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    candidate_id: String,
    action: ReviewAction,
    #[serde(default)]
    reviewer: Option<String>,
    #[serde(default)]
    timestamp: Option<chrono::DateTime<Utc>>,
}

async fn decide(
    State(state): State<Arc<AppState>>,
    Json(body): Json<DecisionBody>,
) -> Result<Json<relqa_core::review::DecisionOutcome>, ApiError> {
    let decision = ReviewDecision {
        candidate_id: body.candidate_id,
        action: body.action,
        reviewer: body.reviewer.unwrap_or_else(|| "anonymous".into()),
        timestamp: body.timestamp.unwrap_or_else(Utc::now),
    };
    let mut store = state.store.lock().unwrap();
    let outcome = store.record(&decision).map_err(|e| match e {
        ReviewError::UnknownCandidate(id) => {
            ApiError::new(StatusCode::NOT_FOUND, "unknown_candidate", format!("no candidate {id}"))
        }
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", other.to_string()),
    })?;
    if outcome.changed {
        *state.snapshot.write().unwrap() = Arc::new(store.snapshot().clone());
    }
    Ok(Json(outcome))
}

async fn progress(State(state): State<Arc<AppState>>) -> Json<relqa_core::review::ReviewProgress> {
    Json(state.snapshot().progress())
}

#[derive(Debug, Deserialize)]
struct FinalizeBody {
    n_per_subset: usize,
    #[serde(default)]
    n_positive: Option<usize>,
    seed: u64,
}

async fn finalize(
    State(state): State<Arc<AppState>>,
    Json(body): Json<FinalizeBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let n_positive = body
        .n_positive
        .unwrap_or_else(|| default_positive_count(body.n_per_subset));
    let resolved = state.snapshot().resolved();
    let bench = select_benchmark(&state.cfg.bench_name, &resolved, body.n_per_subset, n_positive, body.seed)
        .map_err(|e| match e {
            BenchError::InsufficientPool { subset, have, need } => ApiError {
                status: StatusCode::CONFLICT,
                body: json!({
                    "error": "insufficient_pool",
                    "message": e.to_string(),
                    "subset": subset,
                    "have": have,
                    "need": need,
                }),
            },
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "finalize_failed", other.to_string()),
        })?;
    let path = state.cfg.benchmark_path.clone();
    bench
        .save(&path)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string()))?;
    Ok(Json(json!({
        "path": path,
        "items": bench.items.len(),
        "counts": bench.subset_counts(),
    })))
}

fn cors(origin: Option<&str>) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => layer.allow_origin(AllowOrigin::exact(o)),
        None => layer.allow_origin(AllowOrigin::any()),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = cors(state.cfg.cors_origin.as_deref());
    Router::new()
        .route("/subsets", get(subsets))
        .route("/subsets/{subset}/candidates", get(candidates))
        .route("/images/{image_id}", get(image))
        .route("/decisions", post(decide))
        .route("/progress", get(progress))
        .route("/finalize", post(finalize))
        .layer(cors)
        .with_state(state)
}

/// Serves on an already bound listener until the process exits.
pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> Result<(), ServiceError> {
    axum::serve(listener, router(state)).await.map_err(ServiceError::Serve)
}

/// Opens the pool, binds `addr`, prints `listening on http://ADDR` to stdout
/// and serves.
pub async fn serve(cfg: ServiceConfig, addr: &str) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::open(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: addr.to_string(),
            source,
        })?;
    let local: SocketAddr = listener.local_addr().map_err(ServiceError::Serve)?;
    println!("listening on http://{local}");
    use std::io::Write;
    let _ = std::io::stdout().flush();
    serve_on(listener, state).await
}
