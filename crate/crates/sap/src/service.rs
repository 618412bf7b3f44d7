//! HTTP query service.
//!
//! - `GET /health`: `{"status": "ok", "images": N, "crops": M}`, or 503 with
//!   `{"status": "loading"}` until the gallery is ready
//! - `POST /v1/query`: `{"text", "appearance_text"?, "k"?, "variant"?}` →
//!   `{"results": [{"rank", "crop_id", "image_id", "bbox", "score"}],
//!   "rerank_applied"}`
//!
//! Pipeline state is immutable once loaded. Queries run on the blocking pool;
//! a semaphore bounds how many are in flight, which bounds concurrent ranker
//! calls.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use sap_core::coarse::TextQuery;
use sap_core::pipeline::PipelineError;
use sap_core::{BBox, Pipeline, PromptVariant};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBody {
    pub text: String,
    #[serde(default)]
    pub appearance_text: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub variant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub rank: usize,
    pub crop_id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReply {
    pub results: Vec<QueryHit>,
    pub rerank_applied: bool,
}

/// Shared service state. The pipeline slot is filled once loading finishes.
pub struct ServiceState {
    pipeline: OnceLock<Arc<Pipeline>>,
    permits: Semaphore,
    next_id: AtomicU64,
}

impl ServiceState {
    pub fn new(max_in_flight: usize) -> Arc<Self> {
        Arc::new(Self {
            pipeline: OnceLock::new(),
            permits: Semaphore::new(max_in_flight.max(1)),
            next_id: AtomicU64::new(0),
        })
    }

    /// Marks the service ready. Later calls are ignored.
    pub fn set_pipeline(&self, pipeline: Arc<Pipeline>) {
        let _ = self.pipeline.set(pipeline);
    }

    pub fn is_ready(&self) -> bool {
        self.pipeline.get().is_some()
    }
}

/// A failed request: status code plus a message for the `error` field.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> ApiError {
    ApiError {
        status,
        message: message.into(),
    }
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    match state.pipeline.get() {
        Some(p) => Json(json!({
            "status": "ok",
            "images": p.gallery().images().len(),
            "crops": p.gallery().crops().len(),
        }))
        .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

/// Runs one query to completion. Embeddings are looked up by the appearance
/// text when given, otherwise by the description.
pub fn answer(pipeline: &Pipeline, query_id: String, body: QueryBody) -> Result<QueryReply, ApiError> {
    let variant = match body.variant.as_deref() {
        Some(v) => v
            .parse::<PromptVariant>()
            .map_err(|e| error(StatusCode::BAD_REQUEST, e.to_string()))?,
        None => pipeline.settings().variant,
    };
    let k = body.k.unwrap_or(pipeline.settings().k);
    if k == 0 {
        return Err(error(StatusCode::BAD_REQUEST, "k must be at least 1"));
    }
    let key = body.appearance_text.clone().unwrap_or_else(|| body.text.clone());
    let query = TextQuery::new(query_id, body.text)
        .map_err(|e| error(StatusCode::BAD_REQUEST, e.to_string()))?
        .with_appearance_text(body.appearance_text)
        .with_embedding_key(key);
    let outcome = pipeline.run_query_with(&query, variant, k).map_err(|e| match e {
        PipelineError::Retrieval(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    })?;
    let scores: HashMap<&str, f64> = outcome
        .coarse
        .iter()
        .map(|c| (c.crop_id.as_str(), c.score))
        .collect();
    let gallery = pipeline.gallery();
    let results = outcome
        .result
        .final_order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| {
            let crop = gallery.crop(id).expect("ranked crops come from the gallery");
            QueryHit {
                rank: i + 1,
                crop_id: id.clone(),
                image_id: crop.source_image_id.clone(),
                bbox: crop.bbox,
                score: scores[id.as_str()],
            }
        })
        .collect();
    Ok(QueryReply {
        results,
        rerank_applied: outcome.result.rerank_applied,
    })
}

async fn query(State(state): State<Arc<ServiceState>>, body: Result<Json<QueryBody>, JsonRejection>) -> Response {
    let Some(pipeline) = state.pipeline.get().cloned() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "gallery is still loading").into_response();
    };
    let body = match body {
        Ok(Json(b)) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()).into_response(),
    };
    let Ok(_permit) = state.permits.acquire().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down").into_response();
    };
    let id = format!("svc-{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    match tokio::task::spawn_blocking(move || answer(&pipeline, id, body)).await {
        Ok(Ok(reply)) => Json(reply).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("query task failed: {e}")).into_response(),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/query", post(query))
        .with_state(state)
}
