use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::state::{Action, Correction, Event, SortOrder};
use crate::{ReviewError, ReviewService, DEFAULT_PAGE_SIZE};

/// Wire form of a correction; labels are plain strings so unknown ones can be reported.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestAction {
    Relabel(String),
    MoveToCluster(usize),
    FlagOutlier,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRequest {
    pub image_id: String,
    pub action: RequestAction,
    pub annotator: String,
    /// Server time when omitted.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NameRequest {
    /// `null` clears the name.
    pub name: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ItemsQuery {
    #[serde(default = "first_page")]
    page: usize,
    #[serde(default = "default_page_size")]
    page_size: usize,
    #[serde(default)]
    sort: SortOrder,
}

fn first_page() -> usize {
    1
}

fn default_page_size() -> usize {
    DEFAULT_PAGE_SIZE
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

impl ReviewError {
    fn kind(&self) -> &'static str {
        match self {
            ReviewError::NotLoaded => "not_loaded",
            ReviewError::UnknownCluster(_) => "unknown_cluster",
            ReviewError::UnknownImage(_) => "unknown_image",
            ReviewError::UnknownLabel(_) => "unknown_label",
            ReviewError::InvalidRequest(_) => "invalid_request",
            _ => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ReviewError::NotLoaded | ReviewError::UnknownCluster(_) | ReviewError::UnknownImage(_) => StatusCode::NOT_FOUND,
            ReviewError::UnknownLabel(_) | ReviewError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            log::error!("{self}");
        }
        (self.status(), Json(ErrorBody { error: self.kind(), message: self.to_string() })).into_response()
    }
}

type Shared = Arc<ReviewService>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ReviewError> + Send + 'static) -> Result<T, ReviewError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ReviewError::Io(std::io::Error::other(e)))?
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ReviewError> {
    serde_json::from_slice(body).map_err(|e| ReviewError::InvalidRequest(e.to_string()))
}

async fn list_clusters(State(svc): State<Shared>) -> Result<Response, ReviewError> {
    Ok(Json(svc.list_clusters()?).into_response())
}

async fn cluster_items(State(svc): State<Shared>, UrlPath(id): UrlPath<usize>, Query(q): Query<ItemsQuery>) -> Result<Response, ReviewError> {
    Ok(Json(svc.cluster_items(id, q.page, q.page_size, q.sort)?).into_response())
}

async fn submit_correction(State(svc): State<Shared>, body: Bytes) -> Result<Response, ReviewError> {
    let req: CorrectionRequest = parse_body(&body)?;
    let action = match req.action {
        RequestAction::Relabel(name) => Action::Relabel(svc.read(|s| s.parse_label(&name))??),
        RequestAction::MoveToCluster(k) => Action::MoveToCluster(k),
        RequestAction::FlagOutlier => Action::FlagOutlier,
    };
    let correction = Correction { image_id: req.image_id, action, annotator: req.annotator, timestamp: req.timestamp.unwrap_or_else(Utc::now) };
    let ack = correction.clone();
    blocking(move || svc.submit(Event::Correction(correction))).await?;
    Ok(Json(ack).into_response())
}

async fn name_cluster(State(svc): State<Shared>, UrlPath(id): UrlPath<usize>, body: Bytes) -> Result<Response, ReviewError> {
    let req: NameRequest = parse_body(&body)?;
    let name = match req.name {
        Some(n) => Some(svc.read(|s| s.parse_label(&n))??),
        None => None,
    };
    let event = Event::ClusterName { cluster_id: id, name, timestamp: Utc::now() };
    blocking(move || svc.submit(event)).await?;
    Ok(Json(serde_json::json!({ "cluster_id": id, "name": name })).into_response())
}

async fn export(State(svc): State<Shared>) -> Result<Response, ReviewError> {
    let text = svc.export()?.to_jsonl(Path::new(""));
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn thumbnail(State(svc): State<Shared>, UrlPath(image_id): UrlPath<String>) -> Result<Response, ReviewError> {
    let bytes = blocking(move || svc.thumbnail(&image_id)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

pub fn router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/clusters", get(list_clusters))
        .route("/clusters/{id}/items", get(cluster_items))
        .route("/clusters/{id}/name", post(name_cluster))
        .route("/corrections", post(submit_correction))
        .route("/export", get(export))
        .route("/thumbnails/{image_id}", get(thumbnail))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn serve(service: Arc<ReviewService>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
