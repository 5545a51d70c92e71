//! HTTP routes.
//!
//! | method | path                        | body            |
//! |--------|-----------------------------|-----------------|
//! | POST   | `/zones/{z}/requests`       | [`WireRequest`] |
//! | POST   | `/offers/{id}/accept`       | [`AcceptBody`]  |
//! | POST   | `/offers/{id}/decline`      | none            |
//! | GET    | `/zones/{z}/availability`   |                 |
//! | GET    | `/zones/{z}/metrics`        |                 |
//! | PUT    | `/zones/{z}/policy`         | `PolicyPatch`   |
//! | GET    | `/healthz`                  |                 |

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;
use tower_http::cors::CorsLayer;
use zonegate_core::PolicyPatch;

use crate::app::{AcceptBody, ApiError, App, WireRequest};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.code, "message": self.message})),
        )
            .into_response()
    }
}

fn parse<T: DeserializeOwned + Default>(body: &Bytes, required: bool) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        if required {
            return Err(ApiError::bad_request("request body is required"));
        }
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn offer_id(raw: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::bad_request(format!("offer id `{raw}` is not an integer")))
}

async fn submit(State(app): State<Arc<App>>, Path(zone): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let wire: WireRequest = parse(&body, true)?;
    Ok(Json(app.submit(&zone, &wire)?).into_response())
}

async fn accept(State(app): State<Arc<App>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let id = offer_id(&id)?;
    let body: AcceptBody = parse(&body, false)?;
    Ok(Json(app.accept(id, &body)?).into_response())
}

async fn decline(State(app): State<Arc<App>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(app.decline(offer_id(&id)?)?).into_response())
}

async fn availability(State(app): State<Arc<App>>, Path(zone): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(app.availability(&zone)?).into_response())
}

async fn metrics(State(app): State<Arc<App>>, Path(zone): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(app.metrics(&zone)?).into_response())
}

async fn policy(State(app): State<Arc<App>>, Path(zone): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let patch: PolicyPatch = parse(&body, true)?;
    Ok(Json(app.update_policy(&zone, &patch)?).into_response())
}

async fn healthz(State(app): State<Arc<App>>) -> Response {
    (StatusCode::OK, Json(json!({"status": "ok", "seq": app.seq()}))).into_response()
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/zones/{z}/requests", post(submit))
        .route("/zones/{z}/availability", get(availability))
        .route("/zones/{z}/metrics", get(metrics))
        .route("/zones/{z}/policy", put(policy))
        .route("/offers/{id}/accept", post(accept))
        .route("/offers/{id}/decline", post(decline))
        .layer(CorsLayer::permissive())
        .with_state(app)
}
