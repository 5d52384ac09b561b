//! JSON API over a [`ModelRegistry`].
//!
//! `GET /api/models` lists models; `POST /api/rank` ranks one context with
//! one or more models. Errors come back as `{"error": "..."}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::registry::{ModelInfo, ModelRegistry, ModelResult, ServeConfig};
use crate::ServeError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRequest {
    pub models: Vec<String>,
    pub context: String,
    pub k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RankResponse {
    pub results: Vec<ModelResult>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServeError::UnknownModel(_) => StatusCode::NOT_FOUND,
            ServeError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (
            status,
            Json(ErrorBody {
                error: self.to_string(),
            }),
        )
            .into_response()
    }
}

async fn list_models(State(registry): State<Arc<ModelRegistry>>) -> Json<ModelsResponse> {
    Json(ModelsResponse {
        models: registry.models(),
    })
}

// The body is parsed by hand so every malformed request maps to 400 with
// the usual error body.
async fn rank(
    State(registry): State<Arc<ModelRegistry>>,
    headers: axum::http::HeaderMap,
    body: Bytes,
) -> Result<Json<RankResponse>, ServeError> {
    if let Some(ct) = headers.get(header::CONTENT_TYPE) {
        let ct = ct.to_str().unwrap_or_default();
        if !ct.starts_with("application/json") {
            return Err(ServeError::InvalidRequest(format!("unsupported content type {ct:?}")));
        }
    }
    let req: RankRequest =
        serde_json::from_slice(&body).map_err(|e| ServeError::InvalidRequest(format!("invalid body: {e}")))?;
    let results = tokio::task::spawn_blocking(move || registry.rank(&req.models, &req.context, req.k))
        .await
        .map_err(|e| ServeError::Internal(e.to_string()))??;
    Ok(Json(RankResponse { results }))
}

pub fn router(registry: Arc<ModelRegistry>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/models", get(list_models))
        .route("/api/rank", post(rank))
        .with_state(registry);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Loads every configured model, binds the port and serves until ctrl-c.
pub async fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let registry = tokio::task::spawn_blocking({
        let config = config.clone();
        move || ModelRegistry::from_config(&config)
    })
    .await
    .map_err(|e| ServeError::Internal(e.to_string()))??;
    let app = router(Arc::new(registry), config.static_dir.clone());
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServeError::Bind(addr.to_string(), e))?;
    log::info!("event=listening addr={addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            if let Err(e) = tokio::signal::ctrl_c().await {
                log::error!("cannot listen for shutdown signal: {e}");
                std::future::pending::<()>().await;
            }
            log::info!("event=shutdown");
        })
        .await
        .map_err(|e| ServeError::Internal(e.to_string()))
}
