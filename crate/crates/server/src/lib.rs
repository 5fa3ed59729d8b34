//! HTTP API for the rating console.
//!
//! Routes:
//!
//! | method | path                                   | body / reply                       |
//! |--------|----------------------------------------|------------------------------------|
//! | GET    | `/runs`                                | run ids                            |
//! | GET    | `/runs/{run}/tasks`                    | every task of the run              |
//! | GET    | `/runs/{run}/next?annotator=ID`        | [`NextItem`], or 204 when done     |
//! | POST   | `/runs/{run}/ratings`                  | `RatingSubmission` → stored record |
//! | GET    | `/runs/{run}/ratings`                  | resolved ratings                   |
//! | GET    | `/runs/{run}/aggregate`                | `RunRatings`                       |
//! | GET    | `/items/{item}/images/{before,after,concat}` | PNG                          |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use narrator_core::annotation::{AnnotationError, AnnotationStore, RatingSubmission, Task};
use narrator_core::dataset::DatasetStore;
use narrator_core::imaging::{concat_side_by_side, DEFAULT_FILL};

#[derive(Clone)]
pub struct AppState {
    pub annotations: Arc<AnnotationStore>,
    /// Source of the images; image routes answer 404 without it.
    pub dataset: Option<Arc<DatasetStore>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub item_id: String,
    pub pair_id: String,
    pub image_before_url: String,
    pub image_after_url: String,
    pub image_concat_url: String,
    pub explanation: String,
    pub progress: Progress,
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
}

/// JSON error body: `{"error": "..."}`.
#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match &e {
            AnnotationError::ScoreOutOfRange(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotationError::UnknownItem(_)
            | AnnotationError::UnknownAnnotator(_)
            | AnnotationError::UnknownRun(_) => StatusCode::NOT_FOUND,
            AnnotationError::NoRatings => StatusCode::CONFLICT,
            AnnotationError::DuplicateRun(_) | AnnotationError::InvalidRun(_) => {
                StatusCode::BAD_REQUEST
            }
            AnnotationError::Ledger { .. } | AnnotationError::Io(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.0.is_server_error() {
            tracing::error!(status = %self.0, "{}", self.1);
        }
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{run}/tasks", get(list_tasks))
        .route("/runs/{run}/next", get(next_item))
        .route("/runs/{run}/ratings", get(list_ratings).post(submit_rating))
        .route("/runs/{run}/aggregate", get(aggregate))
        .route("/items/{item}/images/{which}", get(item_image))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "rating API listening");
    axum::serve(listener, router(state)).await
}

async fn list_runs(State(s): State<AppState>) -> Json<Vec<String>> {
    Json(s.annotations.run_ids())
}

async fn list_tasks(State(s): State<AppState>, Path(run): Path<String>) -> ApiResult<Json<Vec<Task>>> {
    Ok(Json(s.annotations.tasks(&run)?))
}

fn image_url(item_id: &str, which: &str) -> String {
    format!("/items/{item_id}/images/{which}")
}

async fn next_item(
    State(s): State<AppState>,
    Path(run): Path<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<Response> {
    let Some(task) = s.annotations.next_item(&run, &q.annotator)? else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let (done, total) = s.annotations.progress(&run, &q.annotator)?;
    Ok(Json(NextItem {
        image_before_url: image_url(&task.item_id, "before"),
        image_after_url: image_url(&task.item_id, "after"),
        image_concat_url: image_url(&task.item_id, "concat"),
        item_id: task.item_id,
        pair_id: task.pair_id,
        explanation: task.explanation,
        progress: Progress { done, total },
    })
    .into_response())
}

async fn submit_rating(
    State(s): State<AppState>,
    Path(run): Path<String>,
    Json(sub): Json<RatingSubmission>,
) -> ApiResult<Response> {
    let record = s.annotations.submit_rating(&run, sub)?;
    Ok(Json(record).into_response())
}

async fn list_ratings(State(s): State<AppState>, Path(run): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.annotations.ratings(&run)?).into_response())
}

async fn aggregate(State(s): State<AppState>, Path(run): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.annotations.aggregate_ratings(&run)?).into_response())
}

async fn item_image(
    State(s): State<AppState>,
    Path((item, which)): Path<(String, String)>,
) -> ApiResult<Response> {
    let not_found = |msg: String| ApiError(StatusCode::NOT_FOUND, msg);
    let task = s.annotations.task(&item)?;
    let dataset = s
        .dataset
        .clone()
        .ok_or_else(|| not_found("no dataset attached".into()))?;
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ApiError> {
        match which.as_str() {
            "before" | "after" => {
                let path = dataset
                    .image_path(&task.pair_id, which == "after")
                    .map_err(|e| not_found(e.to_string()))?;
                std::fs::read(&path)
                    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
            }
            "concat" => {
                let pair = dataset
                    .load_pair(&task.pair_id)
                    .map_err(|e| not_found(e.to_string()))?;
                concat_side_by_side(&pair.image_before, &pair.image_after, DEFAULT_FILL)
                    .to_png()
                    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
            }
            other => Err(not_found(format!("unknown image {other:?}"))),
        }
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
