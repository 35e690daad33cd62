//! Annotation HTTP API, mounted under both `/api` and `/api/v1`.

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use servobot::tfod::{AnnotationSubmission, HumanQueue, PendingFailure, SubmissionAck, SubmitError, TrialStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ApiError { error: msg.into() })).into_response()
}

async fn failures(State(q): State<HumanQueue>) -> Json<Vec<PendingFailure>> {
    Json(q.list_pending())
}

async fn image(State(q): State<HumanQueue>, Path(id): Path<u64>) -> Response {
    let Some(img) = q.image(id) else {
        return error(StatusCode::NOT_FOUND, format!("no image {id}"));
    };
    match img.record.encode_png() {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn annotations(State(q): State<HumanQueue>, Json(sub): Json<AnnotationSubmission>) -> Response {
    match q.submit(&sub) {
        Ok(ack) => (StatusCode::CREATED, Json::<SubmissionAck>(ack)).into_response(),
        Err(e @ SubmitError::UnknownEvent(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ SubmitError::Conflict(_)) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e @ SubmitError::Invalid(_)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

async fn status(State(q): State<HumanQueue>) -> Json<TrialStatus> {
    Json(q.status())
}

pub fn router(queue: HumanQueue) -> Router {
    let api = Router::new()
        .route("/failures", get(failures))
        .route("/images/{id}", get(image))
        .route("/annotations", post(annotations))
        .route("/status", get(status));
    Router::new()
        .nest("/api/v1", api.clone())
        .nest("/api", api)
        .with_state(queue)
}

/// Serve until the process exits.
pub async fn serve(listener: tokio::net::TcpListener, queue: HumanQueue) -> std::io::Result<()> {
    axum::serve(listener, router(queue)).await
}
