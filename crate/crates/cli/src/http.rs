//! JSON-over-HTTP front end for the what-if workbench.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::service::{parse_request, report_bytes, Engine, RankRequest, ServiceError, SimulationRequest, API_SCHEMA_VERSION};

pub const DEFAULT_PORT: u16 = 8787;

fn json_response(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn ok_json<T: Serialize>(value: &T) -> Response {
    json_response(StatusCode::OK, report_bytes(value))
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ServiceError::BadRequest(errors) => (
                StatusCode::BAD_REQUEST,
                json!({"schema_version": API_SCHEMA_VERSION, "error": "invalid-request", "fields": errors}),
            ),
            ServiceError::Infeasible { action, reason } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"schema_version": API_SCHEMA_VERSION, "error": "infeasible-action", "action": action, "reason": reason}),
            ),
            ServiceError::Internal(detail) => {
                eprintln!("internal error: {detail}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    json!({"schema_version": API_SCHEMA_VERSION, "error": "internal", "message": "simulation failed; see server log"}),
                )
            }
        };
        json_response(status, report_bytes(&body))
    }
}

async fn health() -> Response {
    ok_json(&json!({
        "schema_version": API_SCHEMA_VERSION,
        "status": "ok",
        "versions": {"service": env!("CARGO_PKG_VERSION"), "api": API_SCHEMA_VERSION},
    }))
}

async fn actions(State(engine): State<Arc<Engine>>) -> Response {
    let list: Vec<_> = engine
        .default_actions()
        .into_iter()
        .map(|a| json!({"id": a.id(), "action": a}))
        .collect();
    ok_json(&json!({"schema_version": API_SCHEMA_VERSION, "actions": list}))
}

async fn run_blocking<T, F>(engine: Arc<Engine>, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ServiceError::Internal(format!("worker panicked: {e}")))?
}

async fn simulate(State(engine): State<Arc<Engine>>, body: Bytes) -> Response {
    let req: SimulationRequest = match parse_request(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match run_blocking(engine, move |e| e.simulate(&req)).await {
        Ok(resp) => ok_json(&resp),
        Err(e) => e.into_response(),
    }
}

async fn rank(State(engine): State<Arc<Engine>>, body: Bytes) -> Response {
    let req: RankRequest = match parse_request(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match run_blocking(engine, move |e| e.rank(&req)).await {
        Ok(report) => ok_json(&report),
        Err(e) => e.into_response(),
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/actions", get(actions))
        .route("/api/simulate", post(simulate))
        .route("/api/rank", post(rank))
        .layer(CorsLayer::permissive())
        .with_state(engine)
}

pub async fn serve(engine: Arc<Engine>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(engine)).await
}
