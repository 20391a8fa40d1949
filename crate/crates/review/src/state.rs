//! In-memory review state rebuilt from a cluster manifest plus an event log.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, Utc};
use fusc_core::data::{DatasetManifest, ImageRecord, ViewLabel};
use fusc_core::pipeline::ClusterManifest;
use serde::{Deserialize, Serialize};

use crate::ReviewError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Relabel(ViewLabel),
    MoveToCluster(usize),
    FlagOutlier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub image_id: String,
    pub action: Action,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
}

/// One durable entry of the review log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Correction(Correction),
    ClusterName {
        cluster_id: usize,
        /// `None` clears the name.
        name: Option<ViewLabel>,
        timestamp: DateTime<Utc>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCount {
    pub label: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub size: usize,
    /// `None` for an empty cluster.
    pub mean_confidence: Option<f64>,
    pub min_confidence: Option<f64>,
    pub name: Option<ViewLabel>,
    /// Most frequent original pseudo-labels, at most three.
    pub top_pseudo_labels: Vec<LabelCount>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    #[default]
    ConfidenceAsc,
    ConfidenceDesc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterItem {
    pub image_id: String,
    pub confidence: f64,
    pub pseudo_label: Option<String>,
    pub effective_label: Option<ViewLabel>,
    pub flagged: bool,
    pub thumbnail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemPage {
    pub cluster_id: usize,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub items: Vec<ClusterItem>,
}

pub struct ReviewState {
    manifest: ClusterManifest,
    row_of: HashMap<String, usize>,
    original: Vec<Option<ViewLabel>>,
    membership: Vec<usize>,
    latest: HashMap<usize, Correction>,
    names: BTreeMap<usize, ViewLabel>,
    events: usize,
}

impl ReviewState {
    pub fn new(manifest: ClusterManifest) -> Result<Self, ReviewError> {
        let mut row_of = HashMap::with_capacity(manifest.rows.len());
        let mut original = Vec::with_capacity(manifest.rows.len());
        for (i, row) in manifest.rows.iter().enumerate() {
            if row_of.insert(row.image_id.clone(), i).is_some() {
                return Err(ReviewError::InvalidManifest(format!("duplicate image `{}`", row.image_id)));
            }
            if row.cluster_id >= manifest.num_clusters {
                return Err(ReviewError::InvalidManifest(format!("`{}` is in cluster {} of {}", row.image_id, row.cluster_id, manifest.num_clusters)));
            }
            original.push(match row.pseudo_label.as_str() {
                "" | fusc_core::data::UNLABELED => None,
                name => Some(name.parse::<ViewLabel>().map_err(|_| ReviewError::UnknownLabel(name.to_string()))?),
            });
        }
        let membership = manifest.rows.iter().map(|r| r.cluster_id).collect();
        Ok(ReviewState { manifest, row_of, original, membership, latest: HashMap::new(), names: BTreeMap::new(), events: 0 })
    }

    pub fn manifest(&self) -> &ClusterManifest {
        &self.manifest
    }

    pub fn num_clusters(&self) -> usize {
        self.manifest.num_clusters
    }

    /// Number of events applied since load.
    pub fn event_count(&self) -> usize {
        self.events
    }

    pub fn parse_label(&self, name: &str) -> Result<ViewLabel, ReviewError> {
        name.parse::<ViewLabel>()
            .ok()
            .filter(|l| self.manifest.label_vocabulary.contains(l))
            .ok_or_else(|| ReviewError::UnknownLabel(name.to_string()))
    }

    fn check_cluster(&self, cluster_id: usize) -> Result<(), ReviewError> {
        if cluster_id < self.manifest.num_clusters {
            Ok(())
        } else {
            Err(ReviewError::UnknownCluster(cluster_id))
        }
    }

    /// Checks an event against the manifest without applying it.
    pub fn validate(&self, event: &Event) -> Result<(), ReviewError> {
        match event {
            Event::Correction(c) => {
                if !self.row_of.contains_key(&c.image_id) {
                    return Err(ReviewError::UnknownImage(c.image_id.clone()));
                }
                match c.action {
                    Action::Relabel(l) if !self.manifest.label_vocabulary.contains(&l) => Err(ReviewError::UnknownLabel(l.to_string())),
                    Action::MoveToCluster(k) => self.check_cluster(k),
                    _ => Ok(()),
                }
            }
            Event::ClusterName { cluster_id, name, .. } => {
                self.check_cluster(*cluster_id)?;
                match name {
                    Some(l) if !self.manifest.label_vocabulary.contains(l) => Err(ReviewError::UnknownLabel(l.to_string())),
                    _ => Ok(()),
                }
            }
        }
    }

    pub fn apply(&mut self, event: Event) -> Result<(), ReviewError> {
        self.validate(&event)?;
        match event {
            Event::Correction(c) => {
                let row = self.row_of[&c.image_id];
                if let Action::MoveToCluster(k) = c.action {
                    self.membership[row] = k;
                }
                self.latest.insert(row, c);
            }
            Event::ClusterName { cluster_id, name, .. } => match name {
                Some(l) => {
                    self.names.insert(cluster_id, l);
                }
                None => {
                    self.names.remove(&cluster_id);
                }
            },
        }
        self.events += 1;
        Ok(())
    }

    pub fn cluster_name(&self, cluster_id: usize) -> Option<ViewLabel> {
        self.names.get(&cluster_id).copied()
    }

    pub fn cluster_of(&self, image_id: &str) -> Option<usize> {
        self.row_of.get(image_id).map(|&r| self.membership[r])
    }

    fn effective_row(&self, row: usize) -> Option<ViewLabel> {
        match self.latest.get(&row).map(|c| &c.action) {
            Some(Action::Relabel(l)) => Some(*l),
            Some(Action::FlagOutlier) => None,
            Some(Action::MoveToCluster(_)) | None => self.names.get(&self.membership[row]).copied().or(self.original[row]),
        }
    }

    /// Latest relabel, else outlier flag (blank), else the cluster name, else the original label.
    pub fn effective_label(&self, image_id: &str) -> Result<Option<ViewLabel>, ReviewError> {
        let row = *self.row_of.get(image_id).ok_or_else(|| ReviewError::UnknownImage(image_id.to_string()))?;
        Ok(self.effective_row(row))
    }

    pub fn list_clusters(&self) -> Vec<ClusterSummary> {
        let c = self.manifest.num_clusters;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (row, &k) in self.membership.iter().enumerate() {
            rows[k].push(row);
        }
        rows.into_iter()
            .enumerate()
            .map(|(k, members)| {
                let conf: Vec<f64> = members.iter().map(|&r| self.manifest.rows[r].confidence).collect();
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for &r in &members {
                    let label = self.manifest.rows[r].pseudo_label.as_str();
                    if !label.is_empty() {
                        *counts.entry(label).or_default() += 1;
                    }
                }
                let mut top: Vec<LabelCount> = counts.into_iter().map(|(l, n)| LabelCount { label: l.to_string(), count: n }).collect();
                top.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
                top.truncate(3);
                ClusterSummary {
                    cluster_id: k,
                    size: members.len(),
                    mean_confidence: (!conf.is_empty()).then(|| conf.iter().sum::<f64>() / conf.len() as f64),
                    min_confidence: conf.iter().copied().reduce(f64::min),
                    name: self.names.get(&k).copied(),
                    top_pseudo_labels: top,
                }
            })
            .collect()
    }

    /// One-based pages; a page past the end is empty.
    pub fn cluster_items(&self, cluster_id: usize, page: usize, page_size: usize, sort: SortOrder) -> Result<ItemPage, ReviewError> {
        self.check_cluster(cluster_id)?;
        if page == 0 || page_size == 0 {
            return Err(ReviewError::InvalidRequest("page and page_size start at 1".into()));
        }
        let mut members: Vec<usize> = (0..self.membership.len()).filter(|&r| self.membership[r] == cluster_id).collect();
        let rows = &self.manifest.rows;
        members.sort_by(|&a, &b| {
            let by_conf = rows[a].confidence.total_cmp(&rows[b].confidence);
            let by_conf = if sort == SortOrder::ConfidenceDesc { by_conf.reverse() } else { by_conf };
            by_conf.then_with(|| rows[a].image_id.cmp(&rows[b].image_id))
        });
        let total = members.len();
        let items = members
            .into_iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .map(|r| {
                let row = &rows[r];
                ClusterItem {
                    image_id: row.image_id.clone(),
                    confidence: row.confidence,
                    pseudo_label: self.original[r].map(|l| l.to_string()),
                    effective_label: self.effective_row(r),
                    flagged: matches!(self.latest.get(&r).map(|c| &c.action), Some(Action::FlagOutlier)),
                    thumbnail: format!("/thumbnails/{}", row.image_id),
                }
            })
            .collect();
        Ok(ItemPage { cluster_id, page, page_size, total, items })
    }

    pub fn pixel_path(&self, image_id: &str) -> Result<&Path, ReviewError> {
        let row = *self.row_of.get(image_id).ok_or_else(|| ReviewError::UnknownImage(image_id.to_string()))?;
        Ok(&self.manifest.rows[row].pixel_path)
    }

    /// Dataset manifest whose labels are the effective labels, in cluster-manifest row order.
    pub fn export(&self) -> DatasetManifest {
        let records = self
            .manifest
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| ImageRecord {
                image_id: row.image_id.clone(),
                patient_id: row.patient_id.clone(),
                pixel_path: row.pixel_path.clone(),
                pseudo_label: self.effective_row(r),
                machine: row.machine.clone(),
                width: row.width,
                height: row.height,
            })
            .collect();
        let mut provenance = BTreeMap::new();
        provenance.insert("generator".to_string(), "fusc-review".to_string());
        provenance.insert("review_events".to_string(), self.events.to_string());
        DatasetManifest { records, label_vocabulary: self.manifest.label_vocabulary.clone(), provenance }
    }
}
