//! Exact k-nearest-neighbour mining in embedding space.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::write_atomic;
use crate::data::DatasetManifest;
use crate::ssl::{Distance, EmbeddingMatrix};

/// Query rows per parallel task; each task holds one N-length similarity row at a time.
pub const BLOCK: usize = 128;
pub const NEIGHBOR_KIND: &str = "fusc-neighbors";

#[derive(Debug, Error)]
pub enum NeighborError {
    #[error("K = {k} must lie in 1..={max} for {n} embeddings")]
    KTooLarge { k: usize, max: usize, n: usize },
    #[error("embeddings must be L2-normalized before mining")]
    NotNormalized,
    #[error("sample {0} has no pseudo label")]
    UnlabeledSample(String),
    #[error("neighbor table is malformed: {0}")]
    Malformed(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `neighbors[i]` holds row indices into `ids`, most similar first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub ids: Vec<String>,
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
    pub metric: Distance,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    kind: String,
    version: u32,
    k: usize,
    rows: usize,
    metric: Distance,
    ids_file: String,
    table_file: String,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn neighbor_ids(&self, row: usize) -> Vec<&str> {
        self.neighbors[row].iter().map(|&j| self.ids[j].as_str()).collect()
    }

    /// Writes `<path>` (JSON header), `<path>.ids` and a tab-separated `<path>.tsv` id table.
    pub fn save(&self, path: &Path) -> Result<(), NeighborError> {
        let ids_path = path.with_extension("ids");
        let table_path = path.with_extension("tsv");
        let mut ids = String::new();
        for id in &self.ids {
            ids.push_str(id);
            ids.push('\n');
        }
        write_atomic(&ids_path, ids.as_bytes())?;
        let mut table = String::new();
        for row in 0..self.len() {
            table.push_str(&self.neighbor_ids(row).join("\t"));
            table.push('\n');
        }
        write_atomic(&table_path, table.as_bytes())?;
        let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let header = IndexHeader {
            kind: NEIGHBOR_KIND.into(),
            version: 1,
            k: self.k,
            rows: self.len(),
            metric: self.metric,
            ids_file: name(&ids_path),
            table_file: name(&table_path),
        };
        write_atomic(path, &serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeighborError> {
        let header: IndexHeader = serde_json::from_slice(&std::fs::read(path)?)?;
        if header.kind != NEIGHBOR_KIND || header.version != 1 {
            return Err(NeighborError::Malformed(format!("unexpected kind {:?}", header.kind)));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let ids: Vec<String> = std::fs::read_to_string(dir.join(&header.ids_file))?.lines().map(str::to_string).collect();
        let pos: std::collections::HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let table = std::fs::read_to_string(dir.join(&header.table_file))?;
        let mut neighbors = Vec::with_capacity(ids.len());
        for (line_no, line) in table.lines().enumerate() {
            let row: Result<Vec<usize>, _> = line
                .split('\t')
                .map(|id| pos.get(id).copied().ok_or_else(|| NeighborError::Malformed(format!("unknown id {id:?} on row {line_no}"))))
                .collect();
            let row = row?;
            if row.len() != header.k {
                return Err(NeighborError::Malformed(format!("row {line_no} has {} entries, expected {}", row.len(), header.k)));
            }
            neighbors.push(row);
        }
        if neighbors.len() != ids.len() || ids.len() != header.rows {
            return Err(NeighborError::Malformed("row count differs from id count".into()));
        }
        Ok(NeighborIndex { ids, neighbors, k: header.k, metric: header.metric })
    }
}

/// Similarity used by both the blocked search and the oracle.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn rank(ids: &[String], a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| ids[a.1].cmp(&ids[b.1])).then(a.1.cmp(&b.1))
}

fn check(emb: &EmbeddingMatrix, k: usize) -> Result<(), NeighborError> {
    let n = emb.len();
    if k == 0 || k + 1 > n {
        return Err(NeighborError::KTooLarge { k, max: n.saturating_sub(1), n });
    }
    if !emb.normalized {
        return Err(NeighborError::NotNormalized);
    }
    Ok(())
}

fn rows<'a>(vectors: &'a ndarray::CowArray<'_, f32, ndarray::Ix2>) -> Vec<&'a [f32]> {
    vectors.rows().into_iter().map(|r| r.to_slice().expect("standard layout")).collect()
}

/// Top-`k` cosine neighbours of every row, self excluded, ties by ascending id.
pub fn mine_neighbors(emb: &EmbeddingMatrix, k: usize) -> Result<NeighborIndex, NeighborError> {
    check(emb, k)?;
    let vectors = emb.vectors.as_standard_layout();
    let data = rows(&vectors);
    let n = data.len();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let blocks: Vec<Vec<Vec<usize>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + BLOCK).min(n);
            let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
            (start..end)
                .map(|i| {
                    scratch.clear();
                    scratch.extend((0..n).filter(|&j| j != i).map(|j| (dot(data[i], data[j]), j)));
                    let cmp = |a: &(f64, usize), b: &(f64, usize)| rank(&emb.ids, *a, *b);
                    if k < scratch.len() {
                        scratch.select_nth_unstable_by(k - 1, cmp);
                        scratch.truncate(k);
                    }
                    scratch.sort_by(cmp);
                    scratch.iter().map(|&(_, j)| j).collect()
                })
                .collect()
        })
        .collect();
    Ok(NeighborIndex { ids: emb.ids.clone(), neighbors: blocks.into_iter().flatten().collect(), k, metric: Distance::Cosine })
}

/// Full-matrix reference implementation.
pub fn mine_neighbors_naive(emb: &EmbeddingMatrix, k: usize) -> Result<NeighborIndex, NeighborError> {
    check(emb, k)?;
    let vectors = emb.vectors.as_standard_layout();
    let data = rows(&vectors);
    let n = data.len();
    let sims: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(data[i], data[j])).collect()).collect();
    let neighbors = (0..n)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sims[i][j], j)).collect();
            all.sort_by(|a, b| rank(&emb.ids, *a, *b));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    Ok(NeighborIndex { ids: emb.ids.clone(), neighbors, k, metric: Distance::Cosine })
}

/// Fraction of (sample, neighbour) pairs whose pseudo labels agree.
pub fn neighbor_label_agreement(index: &NeighborIndex, manifest: &DatasetManifest) -> Result<f64, NeighborError> {
    let by_id = manifest.id_index();
    let label = |id: &str| {
        by_id
            .get(id)
            .and_then(|&r| manifest.records[r].pseudo_label)
            .ok_or_else(|| NeighborError::UnlabeledSample(id.to_string()))
    };
    let labels: Vec<_> = index.ids.iter().map(|id| label(id)).collect::<Result<_, _>>()?;
    let mut agree = 0usize;
    let mut total = 0usize;
    for (i, row) in index.neighbors.iter().enumerate() {
        for &j in row {
            total += 1;
            agree += (labels[i] == labels[j]) as usize;
        }
    }
    Ok(if total == 0 { 0.0 } else { agree as f64 / total as f64 })
}
