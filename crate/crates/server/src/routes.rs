//! HTTP handlers. Store work runs on the blocking pool.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, patch, post};
use axum::{Extension, Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

use neusymms_core::context::ContextOptions;
use neusymms_core::model::{Category, MemoryFact, MemoryType, Scope};
use neusymms_core::service::{MemoryService, ProcessRequest};
use neusymms_core::store::{ActiveFilter, Actor, ClearFilter, FactPatch, FactQuery, QueryOrder};

use crate::auth::{Auth, Principal};
use crate::error::ApiError;

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;
pub const DELETE_REASON: &str = "deleted";

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<MemoryService>,
    pub auth: Arc<Auth>,
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/v1/users/{user_id}/memory:process", post(process))
        .route("/v1/users/{user_id}/memory:context", post(context))
        .route("/v1/users/{user_id}/facts", get(list))
        .route("/v1/users/{user_id}/facts/summary", get(summary))
        .route("/v1/users/{user_id}/facts:clear", post(clear))
        .route("/v1/facts/{id}", patch(edit))
        .route("/v1/facts/{id}", delete(remove))
        .route_layer(middleware::from_fn_with_state(state.clone(), authenticate));
    Router::new()
        .route("/healthz", get(|| async { Json(json!({ "status": "ok" })) }))
        .merge(api)
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

async fn authenticate(State(state): State<AppState>, mut req: Request, next: Next) -> Response {
    match state.auth.authenticate(req.headers()) {
        Ok(principal) => {
            req.extensions_mut().insert(principal.clone());
            let mut response = next.run(req).await;
            response.extensions_mut().insert(principal);
            response
        }
        Err(e) => e.into_response(),
    }
}

async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let response = next.run(req).await;
    let principal = response
        .extensions()
        .get::<Principal>()
        .map(|p| p.fingerprint.as_str())
        .unwrap_or("-");
    tracing::info!(
        target: "neusymms::request",
        method = %method,
        path,
        status = response.status().as_u16(),
        latency_ms = start.elapsed().as_secs_f64() * 1000.0,
        principal,
        "request"
    );
    response
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

/// Parses a JSON body. An empty body reads as `{}`. Syntax errors are
/// 400s; well-formed bodies of the wrong shape go through `shape_error`.
fn parse_body<T: DeserializeOwned>(body: &Bytes, shape_error: fn(String) -> ApiError) -> Result<T, ApiError> {
    let text: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    let mut de = serde_json::Deserializer::from_slice(text);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = if path == "." { inner.to_string() } else { format!("{path}: {inner}") };
        if inner.is_data() {
            shape_error(message)
        } else {
            ApiError::bad_request(message)
        }
    })?;
    de.end().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(value)
}

fn parse_id(raw: &str) -> Result<Uuid, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::bad_request(format!("`{raw}` is not a fact id")))
}

async fn process(
    State(state): State<AppState>,
    Extension(principal): Extension<Principal>,
    Path(user_id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    principal.authorize(&user_id)?;
    let req: ProcessRequest = parse_body(&body, ApiError::bad_request)?;
    if req.turns.is_empty() {
        return Err(ApiError::bad_request("turns must not be empty"));
    }
    let report = blocking(move || Ok(state.service.process(&user_id, &req, Actor::Api)?)).await?;
    Ok(Json(report).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextRequest {
    #[serde(default)]
    cap: Option<i64>,
    #[serde(default)]
    touch: Option<bool>,
}

async fn context(
    State(state): State<AppState>,
    Extension(principal): Extension<Principal>,
    Path(user_id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    principal.authorize(&user_id)?;
    let req: ContextRequest = parse_body(&body, ApiError::bad_request)?;
    let defaults = ContextOptions::default();
    let cap = match req.cap {
        None => defaults.cap,
        Some(c) if c >= 1 => c as usize,
        Some(c) => return Err(ApiError::bad_request(format!("cap must be at least 1, got {c}"))),
    };
    let opts = ContextOptions {
        cap,
        touch: req.touch.unwrap_or(defaults.touch),
    };
    let block = blocking(move || Ok(state.service.context(&user_id, opts))).await?;
    Ok(Json(block).into_response())
}

/// Query parameters of the list endpoint.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListParams {
    pub scope: Option<Scope>,
    pub agent_id: Option<String>,
    pub flow_id: Option<String>,
    pub category: Option<Category>,
    pub memory_type: Option<MemoryType>,
    pub active: Option<ActiveFilter>,
    pub subject: Option<String>,
    pub relation: Option<String>,
    pub search: Option<String>,
    pub order: Option<QueryOrder>,
    pub limit: Option<usize>,
    pub offset: Option<usize>,
    /// Snapshot token from an earlier page.
    pub snapshot: Option<u64>,
}

impl ListParams {
    pub fn into_query(self, user_id: &str) -> Result<FactQuery, ApiError> {
        let limit = self.limit.unwrap_or(DEFAULT_PAGE);
        if !(1..=MAX_PAGE).contains(&limit) {
            return Err(ApiError::bad_request(format!("limit must be between 1 and {MAX_PAGE}")));
        }
        Ok(FactQuery {
            user_id: user_id.to_string(),
            scope: self.scope,
            agent_id: self.agent_id,
            flow_id: self.flow_id,
            category: self.category,
            memory_type: self.memory_type,
            active: self.active.unwrap_or_default(),
            subject: self.subject,
            relation: self.relation,
            search: self.search,
            order: self.order.unwrap_or_default(),
            limit: Some(limit),
            offset: self.offset.unwrap_or(0),
            as_of: self.snapshot,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct ListResponse {
    pub facts: Vec<MemoryFact>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    /// Pass back as `snapshot` to page through the same state.
    pub snapshot: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_offset: Option<usize>,
}

async fn list(
    State(state): State<AppState>,
    Extension(principal): Extension<Principal>,
    Path(user_id): Path<String>,
    params: Result<Query<ListParams>, QueryRejection>,
) -> Result<Response, ApiError> {
    principal.authorize(&user_id)?;
    let Query(params) = params.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let q = params.into_query(&user_id)?;
    let (offset, limit) = (q.offset, q.limit.unwrap_or(DEFAULT_PAGE));
    let page = blocking(move || Ok(state.service.store().query(&q)?)).await?;
    let next = offset + page.facts.len();
    Ok(Json(ListResponse {
        next_offset: (next < page.total).then_some(next),
        facts: page.facts,
        total: page.total,
        offset,
        limit,
        snapshot: page.snapshot,
    })
    .into_response())
}

async fn summary(
    State(state): State<AppState>,
    Extension(principal): Extension<Principal>,
    Path(user_id): Path<String>,
) -> Result<Response, ApiError> {
    principal.authorize(&user_id)?;
    let report = blocking(move || Ok(state.service.summary(&user_id)?)).await?;
    Ok(Json(report).into_response())
}

/// Resolves the owner of `id` and checks the principal may act on it.
fn owned_by(state: &AppState, principal: &Principal, id: Uuid) -> Result<String, ApiError> {
    let owner = state
        .service
        .store()
        .owner_of(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown fact {id}")))?;
    principal.authorize(&owner)?;
    Ok(owner)
}

async fn edit(
    State(state): State<AppState>,
    Extension(principal): Extension<Principal>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    owned_by(&state, &principal, id)?;
    let patch: FactPatch = parse_body(&body, ApiError::unprocessable)?;
    if patch.is_empty() {
        return Err(ApiError::unprocessable("patch changes nothing"));
    }
    let fact = blocking(move || Ok(state.service.store().patch(id, &patch, Actor::Api)?)).await?;
    Ok(Json(fact).into_response())
}

async fn remove(
    State(state): State<AppState>,
    Extension(principal): Extension<Principal>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let id = parse_id(&id)?;
    owned_by(&state, &principal, id)?;
    let fact = blocking(move || Ok(state.service.store().deactivate(id, DELETE_REASON, Actor::Api)?)).await?;
    Ok(Json(fact).into_response())
}

async fn clear(
    State(state): State<AppState>,
    Extension(principal): Extension<Principal>,
    Path(user_id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    principal.authorize(&user_id)?;
    let filter: ClearFilter = parse_body(&body, ApiError::bad_request)?;
    let cleared = blocking(move || Ok(state.service.store().clear(&user_id, &filter, Actor::Api)?)).await?;
    Ok(Json(json!({ "cleared": cleared })).into_response())
}
