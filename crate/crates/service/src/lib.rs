//! HTTP/JSON API over a [`Store`], mounted at `/api/v1`.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/datasets?name=&format=` | raw or multipart upload |
//! | GET | `/datasets` | `[{name, sentence_count, created_at}]` |
//! | GET | `/datasets/{name}/sentences/{index}` | one sentence |
//! | POST | `/annotations` | `{dataset, sentence_id, annotator, concepts}` |
//! | GET | `/annotations?dataset=&annotator=` | JSONL |
//! | GET | `/disagreements?dataset=&a=&b=` | disagreement queue |
//! | POST | `/adjudications` | an adjudication decision |
//! | GET | `/export?dataset=&annotator=&decisions=` | JSONL download |
//! | GET | `/reports/agreement?dataset=&annotators=a,b` | agreement report |
//!
//! Errors are `{"error": code, "detail": message}` with a matching status.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use mathcept::agreement::AgreementError;
use mathcept::annotation::SetOptions;
use mathcept::corpus::{ingest, CorpusError, Format};
use mathcept::store::{AdjudicationDecision, Store, StoreError};

pub const ENV_TOKEN: &str = "MATHCEPT_API_TOKEN";
pub const ENV_STORE: &str = "MATHCEPT_STORE";

const MAX_UPLOAD: usize = 256 * 1024 * 1024;
const JSONL: &str = "application/x-ndjson";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code.to_string(),
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let detail = e.to_string();
        let (status, code) = match &e {
            StoreError::UnknownDataset(_) => (StatusCode::NOT_FOUND, "unknown_dataset"),
            StoreError::UnknownSentence { .. } => (StatusCode::NOT_FOUND, "unknown_sentence"),
            StoreError::UnknownAnnotator { .. } => (StatusCode::NOT_FOUND, "unknown_annotator"),
            StoreError::UnknownConcept { .. } => (StatusCode::NOT_FOUND, "unknown_concept"),
            StoreError::Corpus(CorpusError::IndexOutOfRange { .. }) => {
                (StatusCode::NOT_FOUND, "unknown_sentence")
            }
            StoreError::DatasetExists(_) => (StatusCode::CONFLICT, "dataset_exists"),
            StoreError::Corpus(_) | StoreError::Annotation(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_input")
            }
            StoreError::Agreement(AgreementError::TooFewSets(_) | AgreementError::NoSets) => {
                (StatusCode::BAD_REQUEST, "bad_request")
            }
            StoreError::Agreement(_) => (StatusCode::UNPROCESSABLE_ENTITY, "undefined"),
            StoreError::InvalidDatasetName
            | StoreError::EmptyAnnotator
            | StoreError::InvalidDecision(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            StoreError::Io { .. } | StoreError::Corrupt { .. } => {
                log::error!("store failure: {detail}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ApiError::new(status, code, detail)
    }
}

impl From<CorpusError> for ApiError {
    fn from(e: CorpusError) -> Self {
        StoreError::from(e).into()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
struct AppState {
    store: Arc<Store>,
    token: Option<Arc<str>>,
}

/// Service settings.
#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Shared bearer token; when set every API call must present it.
    pub token: Option<String>,
    /// Directory served at `/` (the web front end), if any.
    pub static_dir: Option<PathBuf>,
}

pub fn router(store: Arc<Store>, config: ServiceConfig) -> Router {
    let state = AppState {
        store,
        token: config.token.filter(|t| !t.is_empty()).map(Arc::from),
    };
    let api = Router::new()
        .route("/datasets", post(create_dataset).get(list_datasets))
        .route("/datasets/{name}/sentences/{index}", get(get_sentence))
        .route(
            "/annotations",
            post(submit_annotation).get(list_annotations),
        )
        .route("/disagreements", get(disagreements))
        .route("/adjudications", post(submit_adjudication))
        .route("/export", get(export))
        .route("/reports/agreement", get(agreement_report))
        .fallback(api_not_found)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state);
    let app = Router::new().nest("/api/v1", api);
    match config.static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

/// Serve until Ctrl-C. The bound address is printed to stdout first, so a
/// caller that asked for port 0 can find the server.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    println!("listening on http://{addr}");
    use std::io::Write;
    std::io::stdout().flush()?;
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_ref()) {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

/// Run a blocking store call off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn required<'a>(q: &'a HashMap<String, String>, key: &str) -> ApiResult<&'a str> {
    q.get(key)
        .map(String::as_str)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| ApiError::bad_request(format!("missing query parameter `{key}`")))
}

fn flag(q: &HashMap<String, String>, key: &str, default: bool) -> ApiResult<bool> {
    match q.get(key).map(String::as_str) {
        None | Some("") => Ok(default),
        Some("true" | "1" | "yes") => Ok(true),
        Some("false" | "0" | "no") => Ok(false),
        Some(other) => Err(ApiError::bad_request(format!(
            "`{key}` must be true or false, got {other:?}"
        ))),
    }
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn jsonl_response(bytes: Vec<u8>, download: Option<String>) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(JSONL));
    if let Some(name) = download {
        if let Ok(v) = HeaderValue::from_str(&format!("attachment; filename=\"{name}\"")) {
            headers.insert(header::CONTENT_DISPOSITION, v);
        }
    }
    (headers, bytes).into_response()
}

fn format_of(explicit: Option<&str>, filename: Option<&str>) -> ApiResult<Format> {
    if let Some(f) = explicit.filter(|f| !f.is_empty()) {
        return f
            .parse()
            .map_err(|e: CorpusError| ApiError::bad_request(e.to_string()));
    }
    match filename
        .and_then(|n| n.rsplit_once('.'))
        .map(|(_, ext)| ext)
    {
        Some(ext) => ext
            .parse()
            .map_err(|e: CorpusError| ApiError::bad_request(e.to_string())),
        None => Err(ApiError::bad_request(
            "missing query parameter `format` (csv or jsonl)",
        )),
    }
}

#[derive(Serialize)]
struct Created {
    name: String,
    sentence_count: usize,
    warnings: Vec<mathcept::corpus::IngestWarning>,
    /// Sentences with concepts carried in the upload, stored as `file-gold`.
    gold_sentences: usize,
}

async fn create_dataset(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
    req: Request,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (bytes, filename) = if is_multipart {
        let mut mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let field = mp
            .next_field()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?
            .ok_or_else(|| ApiError::bad_request("multipart upload has no file part"))?;
        let filename = field.file_name().map(str::to_string);
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        (data, filename)
    } else {
        let data = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        (data, None)
    };

    let name = match q.get("name").filter(|n| !n.is_empty()) {
        Some(n) => n.clone(),
        None => filename
            .as_deref()
            .and_then(|f| f.rsplit_once('.').map(|(stem, _)| stem.to_string()))
            .ok_or_else(|| ApiError::bad_request("missing query parameter `name`"))?,
    };
    let format = format_of(q.get("format").map(String::as_str), filename.as_deref())?;

    blocking(move || {
        let ingested = ingest(&bytes, format, &name)?;
        let summary = state.store.create_dataset(ingested.dataset)?;
        let mut gold_sentences = 0;
        if let Some(gold) = &ingested.gold {
            gold_sentences = state.store.put_set(gold)?;
        }
        Ok((
            StatusCode::CREATED,
            Json(Created {
                name: summary.name,
                sentence_count: summary.sentence_count,
                warnings: ingested.warnings,
                gold_sentences,
            }),
        ))
    })
    .await
}

async fn list_datasets(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.store.datasets())
}

async fn get_sentence(
    State(state): State<AppState>,
    Path((name, index)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let index: usize = index
        .parse()
        .map_err(|_| ApiError::bad_request(format!("sentence index {index:?} is not a number")))?;
    Ok(Json(state.store.get_sentence(&name, index)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    dataset: String,
    sentence_id: String,
    annotator: String,
    concepts: Vec<String>,
}

#[derive(Serialize)]
struct Stored {
    dataset: String,
    sentence_id: String,
    annotator: String,
    concepts: Vec<mathcept::concepts::Concept>,
}

async fn submit_annotation(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Stored>> {
    let sub: Submission = json_body(&body)?;
    blocking(move || {
        let concepts = state.store.submit_annotation(
            &sub.dataset,
            &sub.sentence_id,
            &sub.annotator,
            &sub.concepts,
        )?;
        Ok(Json(Stored {
            dataset: sub.dataset,
            sentence_id: sub.sentence_id,
            annotator: sub.annotator,
            concepts,
        }))
    })
    .await
}

async fn list_annotations(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let dataset = required(&q, "dataset")?;
    let annotator = q
        .get("annotator")
        .map(String::as_str)
        .filter(|a| !a.is_empty());
    let bytes = state.store.snapshot().export(dataset, annotator, false)?;
    Ok(jsonl_response(bytes, None))
}

async fn disagreements(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<impl IntoResponse> {
    let dataset = required(&q, "dataset")?;
    let a = required(&q, "a")?;
    let b = required(&q, "b")?;
    Ok(Json(
        state.store.snapshot().disagreement_queue(dataset, a, b)?,
    ))
}

async fn submit_adjudication(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<Json<AdjudicationDecision>> {
    let decision: AdjudicationDecision = json_body(&body)?;
    blocking(move || Ok(Json(state.store.submit_adjudication(decision)?))).await
}

async fn export(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let dataset = required(&q, "dataset")?;
    let annotator = q
        .get("annotator")
        .map(String::as_str)
        .filter(|a| !a.is_empty());
    let decisions = flag(&q, "decisions", false)?;
    let bytes = state
        .store
        .snapshot()
        .export(dataset, annotator, decisions)?;
    let filename = match annotator {
        Some(a) => format!("{dataset}-{a}.jsonl"),
        None => format!("{dataset}.jsonl"),
    };
    Ok(jsonl_response(bytes, Some(filename)))
}

async fn agreement_report(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<impl IntoResponse> {
    let dataset = required(&q, "dataset")?;
    let snapshot = state.store.snapshot();
    let annotators: Vec<String> = match q.get("annotators").filter(|a| !a.is_empty()) {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => {
            snapshot.dataset(dataset)?;
            snapshot.annotators(dataset)
        }
    };
    let opts = SetOptions {
        case_fold: flag(&q, "case_fold", false)?,
        include_candidates: flag(&q, "include_candidates", false)?,
    };
    let adjudicated = flag(&q, "adjudicated", true)?;
    Ok(Json(snapshot.agreement(
        dataset,
        &annotators,
        opts,
        adjudicated,
    )?))
}
