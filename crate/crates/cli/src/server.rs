//! JSON HTTP API over an immutable model and index snapshot.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use pvse_core::dataset::{validate_model_dataset_compat, Dataset};
use pvse_core::embedding::ModelParams;
use pvse_core::partmap::LabelTarget;
use pvse_core::query::{compute_aam, reorder, retrieve, retrieve_part_masked, EmbeddingIndex, PartMask, RetrieveOptions};
use pvse_core::Error;

pub const DEFAULT_TOP_M: usize = 5;

pub struct ServeConfig {
    pub bind: String,
    pub port: u16,
    pub static_dir: Option<PathBuf>,
    pub cors: Vec<String>,
}

struct Snapshot {
    model: ModelParams,
    data: Dataset,
    index: EmbeddingIndex,
}

/// Shared read-only state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState(Arc<Snapshot>);

impl AppState {
    /// Checks compatibility and embeds every image before any request is served.
    pub fn new(model: ModelParams, data: Dataset) -> pvse_core::Result<Self> {
        validate_model_dataset_compat(&model, &data).into_result()?;
        let index = EmbeddingIndex::build(&model, &data)?;
        Ok(Self(Arc::new(Snapshot { model, data, index })))
    }

    pub fn model(&self) -> &ModelParams {
        &self.0.model
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.0.index
    }
}

/// Error body `{error, field, detail}`; every key is always present.
#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    error: &'static str,
    field: Option<String>,
    detail: String,
}

impl ApiError {
    fn bad_request(error: &'static str, field: Option<&str>, detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error,
            field: field.map(str::to_string),
            detail: detail.into(),
        }
    }

    fn invalid(field: &str, detail: impl Into<String>) -> Self {
        Self::bad_request("invalid_field", Some(field), detail)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, error, field) = match &e {
            Error::UnknownTag(_) => (StatusCode::NOT_FOUND, "unknown_tag", None),
            Error::UnknownImage(_) => (StatusCode::NOT_FOUND, "unknown_image", None),
            Error::UnknownPart(_) => (StatusCode::NOT_FOUND, "unknown_part", Some("parts")),
            Error::Argument(_) => (StatusCode::BAD_REQUEST, "invalid_argument", None),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        Self {
            status,
            error,
            field: field.map(str::to_string),
            detail: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body, naming the offending field on failure.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request("malformed_body", None, e.to_string()))?;
    if !value.is_object() {
        return Err(ApiError::bad_request("malformed_body", None, "body must be a JSON object"));
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.inner().to_string();
        let path = e.path().to_string();
        let field = if path == "." {
            // missing and unknown fields are reported at the root
            inner.split('`').nth(1).map(str::to_string)
        } else {
            Some(path.split(['.', '[']).next().unwrap_or(&path).to_string())
        };
        ApiError {
            status: StatusCode::BAD_REQUEST,
            error: "invalid_field",
            field,
            detail: inner,
        }
    })
}

fn check_top_m(top_m: Option<usize>) -> Result<Option<usize>, ApiError> {
    match top_m {
        Some(0) => Err(ApiError::invalid("top_m", "top_m must be at least 1")),
        other => Ok(other),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub query_image_id: String,
    #[serde(default)]
    pub pos_tags: Vec<String>,
    #[serde(default)]
    pub neg_tags: Vec<String>,
    #[serde(default)]
    pub parts: Option<Vec<String>>,
    #[serde(default)]
    pub top_m: Option<usize>,
    #[serde(default)]
    pub exclude_query: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderRequest {
    pub tag: String,
    #[serde(default)]
    pub parts: Option<Vec<String>>,
    #[serde(default)]
    pub restrict_to_tagged: bool,
    #[serde(default)]
    pub top_m: Option<usize>,
}

fn mask_for(state: &AppState, parts: &[String]) -> Result<PartMask, ApiError> {
    let model = state.model();
    Ok(PartMask::from_names(parts, model.scheme(), model.part_dim())?)
}

async fn meta(State(state): State<AppState>) -> Json<Value> {
    let s = &state.0;
    Json(json!({
        "dataset": s.data.name(),
        "scheme": s.model.scheme().name(),
        "parts": s.model.scheme().parts(),
        "part_dim": s.model.part_dim(),
        "grid": { "rows": s.model.grid().0, "cols": s.model.grid().1 },
        "vocab": s.model.vocab().tags(),
        "images": s.index.ids(),
        "default_top_m": DEFAULT_TOP_M,
    }))
}

async fn image_tags(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let i = state.index().position(&id)?;
    Ok(Json(json!({ "image_id": id, "tags": state.index().tags(i) })))
}

async fn retrieve_handler(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: RetrieveRequest = parse_body(&body)?;
    let top_m = check_top_m(req.top_m)?.unwrap_or(DEFAULT_TOP_M);
    let opts = RetrieveOptions {
        top_m,
        exclude_query: req.exclude_query.unwrap_or(true),
    };
    let (model, index) = (state.model(), state.index());
    let ranked = match req.parts.as_deref() {
        None | Some([]) => retrieve(index, model, &req.query_image_id, &req.pos_tags, &req.neg_tags, opts)?,
        Some(parts) => {
            if req.pos_tags.is_empty() {
                return Err(ApiError::invalid("pos_tags", "part-masked retrieval needs at least one positive tag"));
            }
            if !req.neg_tags.is_empty() {
                return Err(ApiError::invalid("neg_tags", "negative tags are not used with parts"));
            }
            let mask = mask_for(&state, parts)?;
            retrieve_part_masked(index, model, &req.query_image_id, &req.pos_tags, &mask, opts)?
        }
    };
    let mode = if req.parts.as_ref().is_none_or(Vec::is_empty) { "arithmetic" } else { "part_masked" };
    Ok(Json(json!({ "mode": mode, "query": ranked.query, "results": ranked.results })).into_response())
}

async fn reorder_handler(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: ReorderRequest = parse_body(&body)?;
    let top_m = check_top_m(req.top_m)?;
    let model = state.model();
    let mask = match req.parts.as_deref() {
        None | Some([]) => PartMask::all(model.num_parts(), model.part_dim()),
        Some(parts) => mask_for(&state, parts)?,
    };
    let ranked = reorder(state.index(), model, &req.tag, &mask, req.restrict_to_tagged, top_m)?;
    let parts: Vec<&str> = mask.parts().iter().map(|&l| model.scheme().parts()[l].as_str()).collect();
    Ok(Json(json!({ "tag": ranked.query, "parts": parts, "results": ranked.results })).into_response())
}

async fn aam_handler(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Value> {
    let tag = params
        .get("tag")
        .filter(|t| !t.is_empty())
        .ok_or_else(|| ApiError::invalid("tag", "query parameter 'tag' is required"))?;
    let grid = compute_aam(state.index(), state.model(), &id, tag)?;
    Ok(Json(serde_json::to_value(grid).expect("aam grid serializes")))
}

async fn segmentation_handler(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let data = &state.0.data;
    let i = data.index_of(&id)?;
    let seg = data.segmentation(i);
    let labels: Vec<&[u8]> = seg.labels().chunks(seg.width()).collect();
    let scheme = state.model().scheme();
    let label_parts: BTreeMap<u8, Option<&str>> = scheme
        .label_to_part()
        .keys()
        .map(|&label| {
            let part = match scheme.target(label) {
                Some(LabelTarget::Part(l)) => Some(scheme.parts()[l].as_str()),
                _ => None,
            };
            (label, part)
        })
        .collect();
    Ok(Json(json!({
        "image_id": id,
        "height": seg.height(),
        "width": seg.width(),
        "labels": labels,
        "label_parts": label_parts,
    })))
}

async fn api_not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        error: "not_found",
        field: None,
        detail: "no such endpoint".into(),
    }
}

/// Builds the router. `static_dir` is served for non-API paths.
pub fn build_router(state: AppState, static_dir: Option<PathBuf>, cors: &[String]) -> anyhow::Result<Router> {
    let api = Router::new()
        .route("/meta", get(meta))
        .route("/images/:id/tags", get(image_tags))
        .route("/retrieve", post(retrieve_handler))
        .route("/reorder", post(reorder_handler))
        .route("/aam/:id", get(aam_handler))
        .route("/segmentation/:id", get(segmentation_handler))
        .fallback(api_not_found);
    let mut app = Router::new().nest("/api", api).with_state(state);
    if let Some(dir) = static_dir {
        if !dir.is_dir() {
            anyhow::bail!("static directory {} does not exist", dir.display());
        }
        app = app.fallback_service(ServeDir::new(dir));
    }
    if !cors.is_empty() {
        let origins = cors
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| anyhow::anyhow!("invalid CORS origin '{o}'")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([axum::http::header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

pub async fn serve(state: AppState, cfg: ServeConfig) -> anyhow::Result<()> {
    let app = build_router(state, cfg.static_dir, &cfg.cors)?;
    let addr: SocketAddr = format!("{}:{}", cfg.bind, cfg.port)
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid bind address: {e}"))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
