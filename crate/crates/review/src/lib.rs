//! Cluster review service: browse clusters, record corrections, export labels.

mod http;
mod log;
mod state;
mod thumbnail;

use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use fusc_core::data::{load_manifest, save_manifest, DataError, DatasetManifest};
use fusc_core::pipeline::{ClusterManifest, PipelineError};

pub use crate::http::{router, serve, CorrectionRequest, NameRequest, RequestAction};
pub use crate::log::EventLog;
pub use crate::state::{
    Action, ClusterItem, ClusterSummary, Correction, Event, ItemPage, LabelCount, ReviewState, SortOrder,
};
pub use crate::thumbnail::MAX_EDGE;

pub const DEFAULT_PAGE_SIZE: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("no cluster manifest is loaded")]
    NotLoaded,
    #[error("unknown cluster {0}")]
    UnknownCluster(usize),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("label `{0}` is not in the vocabulary")]
    UnknownLabel(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid cluster manifest: {0}")]
    InvalidManifest(String),
    #[error("corrupt review log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Loaded {
    state: RwLock<ReviewState>,
    /// Serializes writers; held across append and apply.
    log: Mutex<EventLog>,
    thumbnails: PathBuf,
}

pub struct ReviewService {
    loaded: Option<Loaded>,
}

/// Default event log location next to the manifest.
pub fn default_log_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".review.jsonl");
    manifest.with_file_name(name)
}

/// Default thumbnail cache directory next to the manifest.
pub fn default_thumbnail_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join("thumbnails")
}

impl ReviewService {
    /// A service with nothing loaded; every call fails with [`ReviewError::NotLoaded`].
    pub fn unloaded() -> Self {
        ReviewService { loaded: None }
    }

    /// Loads `manifest` and replays the event log at `log_path`.
    pub fn open(manifest: &Path, log_path: &Path, thumbnails: &Path) -> Result<Self, ReviewError> {
        let mut cm = ClusterManifest::load(manifest)?;
        let base = manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base)?;
        for row in &mut cm.rows {
            if row.pixel_path.is_relative() {
                row.pixel_path = base.join(&row.pixel_path);
            }
        }
        let mut state = ReviewState::new(cm)?;
        let (log, events) = EventLog::open(log_path)?;
        let n = events.len();
        for event in events {
            state.apply(event)?;
        }
        ::log::info!("loaded {} with {n} review events", manifest.display());
        Ok(ReviewService {
            loaded: Some(Loaded { state: RwLock::new(state), log: Mutex::new(log), thumbnails: thumbnails.to_path_buf() }),
        })
    }

    /// [`ReviewService::open`] with the default log and thumbnail locations.
    pub fn open_default(manifest: &Path) -> Result<Self, ReviewError> {
        Self::open(manifest, &default_log_path(manifest), &default_thumbnail_dir(manifest))
    }

    fn loaded(&self) -> Result<&Loaded, ReviewError> {
        self.loaded.as_ref().ok_or(ReviewError::NotLoaded)
    }

    /// Runs `f` against the current state under a read lock.
    pub fn read<T>(&self, f: impl FnOnce(&ReviewState) -> T) -> Result<T, ReviewError> {
        let loaded = self.loaded()?;
        let state = loaded.state.read().unwrap_or_else(|e| e.into_inner());
        Ok(f(&state))
    }

    pub fn list_clusters(&self) -> Result<Vec<ClusterSummary>, ReviewError> {
        self.read(ReviewState::list_clusters)
    }

    pub fn cluster_items(&self, cluster_id: usize, page: usize, page_size: usize, sort: SortOrder) -> Result<ItemPage, ReviewError> {
        self.read(|s| s.cluster_items(cluster_id, page, page_size, sort))?
    }

    /// Validates, durably appends, then applies `event`.
    pub fn submit(&self, event: Event) -> Result<(), ReviewError> {
        let loaded = self.loaded()?;
        let mut log = loaded.log.lock().unwrap_or_else(|e| e.into_inner());
        loaded.state.read().unwrap_or_else(|e| e.into_inner()).validate(&event)?;
        log.append(&event)?;
        loaded.state.write().unwrap_or_else(|e| e.into_inner()).apply(event)
    }

    pub fn export(&self) -> Result<DatasetManifest, ReviewError> {
        self.read(ReviewState::export)
    }

    /// Writes the corrected manifest to `path` and re-reads it through the manifest validator.
    pub fn export_to(&self, path: &Path) -> Result<DatasetManifest, ReviewError> {
        save_manifest(&self.export()?, path)?;
        Ok(load_manifest(path)?)
    }

    /// PNG thumbnail bytes, generated on first request and cached on disk.
    pub fn thumbnail(&self, image_id: &str) -> Result<Vec<u8>, ReviewError> {
        let loaded = self.loaded()?;
        let source = self.read(|s| s.pixel_path(image_id).map(Path::to_path_buf))??;
        thumbnail::cached(&loaded.thumbnails, image_id, &source)
    }
}
