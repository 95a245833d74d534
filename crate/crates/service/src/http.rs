use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::report::{human_report, ReportError};
use crate::rounds::{Service, ServiceError, SubmitRequest};

pub const PORT_ENV: &str = "SETABS_PORT";

/// Port from `SETABS_PORT`, defaulting to 8080.
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.parse().map_err(|_| format!("{PORT_ENV}={v} is not a port number")),
        Err(_) => Ok(8080),
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/round", get(round))
        .route("/api/response", post(response))
        .route("/api/report", get(report))
        .with_state(service)
}

pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(service)).await
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn status_of(e: &ServiceError) -> StatusCode {
    match e {
        ServiceError::BadSession | ServiceError::BadSetSize(_) => StatusCode::BAD_REQUEST,
        ServiceError::UnknownRound(_) => StatusCode::NOT_FOUND,
        ServiceError::Duplicate(_) => StatusCode::CONFLICT,
        ServiceError::Malformed(_) => StatusCode::UNPROCESSABLE_ENTITY,
        ServiceError::Log(_) | ServiceError::CorruptLog { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

#[derive(Deserialize)]
struct RoundQuery {
    session: String,
    n: usize,
}

async fn round(State(svc): State<Arc<Service>>, q: Result<Query<RoundQuery>, axum::extract::rejection::QueryRejection>) -> Response {
    let Ok(Query(q)) = q else {
        return error(StatusCode::BAD_REQUEST, "expected query parameters session and n");
    };
    match svc.serve_round(&q.session, q.n) {
        Ok(view) => Json(view).into_response(),
        Err(e) => error(status_of(&e), e),
    }
}

async fn response(State(svc): State<Arc<Service>>, body: Result<Json<SubmitRequest>, JsonRejection>) -> Response {
    let rejected = |status: StatusCode, message: String| {
        (status, Json(json!({ "accepted": false, "vigilance": null, "error": message }))).into_response()
    };
    let req = match body {
        Ok(Json(req)) => req,
        Err(e) => return rejected(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()),
    };
    match svc.submit(&req) {
        Ok(outcome) => Json(outcome).into_response(),
        Err(e) => rejected(status_of(&e), e.to_string()),
    }
}

/// The human report with item orders redacted: it is reachable by players,
/// and the true orders of answered tasks must not leak to other sessions.
/// Item ids and per-item correlations are kept, so metrics still
/// re-aggregate from the items.
async fn report(State(svc): State<Arc<Service>>) -> Response {
    let records = svc.records();
    match human_report(&records, &svc.pool().tasks, svc.config().max_vigilance_failures) {
        Ok(mut r) => {
            for item in &mut r.report.items {
                item.expected.clear();
                item.predicted.clear();
            }
            Json(r.report).into_response()
        }
        Err(ReportError::Empty) => error(StatusCode::NOT_FOUND, ReportError::Empty),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}
