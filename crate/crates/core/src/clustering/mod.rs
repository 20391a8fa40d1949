//! Cluster head, soft assignments, self-labeling and the K-means baseline.

pub mod head;
pub mod kmeans;
pub mod loss;
pub mod selflabel;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{load_matrix, save_matrix, write_atomic, Blob, BlobError};
use crate::ssl::{EmbeddingMatrix, SslError};

pub use head::{train_cluster_head, train_cluster_head_finetune, HeadEpochLog, HeadTraining};
pub use kmeans::{kmeans, kmeans_baseline, KMeansResult};
pub use loss::{entropy_regularizer, fusc_loss, fusc_loss_logits, fusc_loss_with, FuscLoss, LossOptions};
pub use selflabel::{self_label_train, self_label_train_rasters, SelfLabelConfig, SelfLabelEpoch, SelfLabelOutcome};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("neighbour index ids do not match the embedding ids")]
    IndexEmbeddingMismatch,
    #[error("no sample reaches the confidence threshold {0}")]
    NoConfidentSamples(f64),
    #[error("C = {c} exceeds the number of points N = {n}")]
    CGreaterThanN { c: usize, n: usize },
    #[error("invalid clustering config: {0}")]
    InvalidConfig(String),
    #[error("malformed assignment artifact: {0}")]
    Malformed(String),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Starting point of head training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Gaussian weights, zero biases.
    Random,
    /// Rows are K-means centroids of the training embeddings, unit length times `init_scale`.
    #[default]
    Kmeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterHeadConfig {
    pub num_clusters: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub log_clamp: f64,
    pub average_neighbors: bool,
    pub neighbor_grad: bool,
    pub finetune_encoder: bool,
    /// Learning rate for the encoder when `finetune_encoder` is set.
    pub encoder_learning_rate: f32,
    pub init: HeadInit,
    pub init_scale: f64,
}

impl Default for ClusterHeadConfig {
    fn default() -> Self {
        ClusterHeadConfig {
            num_clusters: 15,
            lambda: 5.0,
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            seed: 0,
            log_clamp: 1e-8,
            average_neighbors: false,
            neighbor_grad: true,
            finetune_encoder: false,
            encoder_learning_rate: 1e-4,
            init: HeadInit::Kmeans,
            init_scale: 10.0,
        }
    }
}

impl ClusterHeadConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::InvalidConfig(m.to_string()));
        if self.num_clusters < 2 {
            return bad("num_clusters must be at least 2");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.log_clamp > 0.0 && self.log_clamp <= 1e-4) {
            return bad("log_clamp must lie in (0, 1e-4]");
        }
        if self.batch_size < 1 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be positive");
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda: self.lambda,
            eps: self.log_clamp,
            average_neighbors: self.average_neighbors,
            neighbor_grad: self.neighbor_grad,
        }
    }
}

/// Linear map from embeddings to `C` logits; `weights` is C×d row-major, then `C` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterHead {
    pub dim: usize,
    pub params: Vec<f32>,
    pub config: ClusterHeadConfig,
}

pub const HEAD_KIND: &str = "fusc-cluster-head";

impl ClusterHead {
    pub fn zeros(dim: usize, config: &ClusterHeadConfig) -> Self {
        ClusterHead { dim, params: vec![0.0; config.num_clusters * (dim + 1)], config: config.clone() }
    }

    /// Gaussian weights with standard deviation `1/√d`, zero biases.
    pub fn random(dim: usize, config: &ClusterHeadConfig) -> Self {
        let mut head = Self::zeros(dim, config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f32).sqrt()).expect("valid std");
        let c = config.num_clusters;
        for w in head.params[..c * dim].iter_mut() {
            *w = normal.sample(&mut rng);
        }
        head
    }

    pub fn num_clusters(&self) -> usize {
        self.config.num_clusters
    }

    pub fn weights(&self) -> ArrayView2<'_, f32> {
        let c = self.num_clusters();
        ArrayView2::from_shape((c, self.dim), &self.params[..c * self.dim]).expect("layout")
    }

    pub fn bias(&self) -> &[f32] {
        &self.params[self.num_clusters() * self.dim..]
    }

    /// Logits for the rows of `x` (N×d), accumulated in f64.
    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let w = self.weights().mapv(|v| v as f64);
        let b = Array1::from_iter(self.bias().iter().map(|&v| v as f64));
        x.dot(&w.t()) + &b.view().insert_axis(Axis(0))
    }

    /// Adds the parameter gradient for inputs `x` and logit gradients `g`.
    pub fn accumulate_grad(&self, x: ArrayView2<f64>, g: ArrayView2<f64>, grads: &mut [f64]) {
        let c = self.num_clusters();
        let gw = g.t().dot(&x);
        for (dst, src) in grads[..c * self.dim].iter_mut().zip(gw.iter()) {
            *dst += src;
        }
        for (dst, src) in grads[c * self.dim..].iter_mut().zip(g.sum_axis(Axis(0)).iter()) {
            *dst += src;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        let meta = serde_json::json!({ "version": 1, "dim": self.dim, "config": self.config });
        Blob::new(HEAD_KIND, meta).with("params", self.params.clone()).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let mut blob = Blob::load(path)?;
        blob.expect_kind(HEAD_KIND)?;
        let dim = blob.meta["dim"].as_u64().ok_or_else(|| ClusterError::Malformed("head dim".into()))? as usize;
        let config: ClusterHeadConfig = serde_json::from_value(blob.meta["config"].clone())?;
        let params = blob.take("params")?;
        if params.len() != config.num_clusters * (dim + 1) {
            return Err(ClusterError::Malformed("head parameter count".into()));
        }
        Ok(ClusterHead { dim, params, config })
    }
}

/// Row-stochastic cluster probabilities with their argmax and maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment {
    pub ids: Vec<String>,
    pub probs: Array2<f64>,
    pub hard_labels: Vec<usize>,
    pub confidence: Vec<f64>,
}

pub const ASSIGNMENT_KIND: &str = "fusc-assignment";

impl SoftAssignment {
    pub fn from_probs(ids: Vec<String>, probs: Array2<f64>) -> Result<Self, ClusterError> {
        if ids.len() != probs.nrows() {
            return Err(ClusterError::DimensionMismatch(format!("{} ids for {} rows", ids.len(), probs.nrows())));
        }
        let mut hard_labels = Vec::with_capacity(ids.len());
        let mut confidence = Vec::with_capacity(ids.len());
        for row in probs.rows() {
            let (arg, max) = argmax(row.iter().copied());
            hard_labels.push(arg);
            confidence.push(max);
        }
        Ok(SoftAssignment { ids, probs, hard_labels, confidence })
    }

    /// One-hot rows from hard labels.
    pub fn one_hot(ids: Vec<String>, labels: &[usize], num_clusters: usize) -> Result<Self, ClusterError> {
        let mut probs = Array2::zeros((labels.len(), num_clusters));
        for (i, &l) in labels.iter().enumerate() {
            probs[[i, l]] = 1.0;
        }
        Self::from_probs(ids, probs)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.probs.ncols()
    }

    /// Writes the header, ids, float32 matrix and a `<path>.labels.tsv` table.
    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        let data: Vec<f32> = self.probs.iter().map(|&v| v as f32).collect();
        save_matrix(path, ASSIGNMENT_KIND, &self.ids, self.num_clusters(), &data, serde_json::Value::Null)?;
        let mut table = String::from("image_id\tcluster\tconfidence\n");
        for i in 0..self.len() {
            table.push_str(&format!("{}\t{}\t{:.6}\n", self.ids[i], self.hard_labels[i], self.confidence[i]));
        }
        write_atomic(&path.with_extension("labels.tsv"), table.as_bytes())?;
        Ok(())
    }

    /// Reads an artifact written by [`SoftAssignment::save`]; rows are renormalised in f64.
    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let (header, ids, data) = load_matrix(path, ASSIGNMENT_KIND)?;
        let mut probs = Array2::from_shape_vec((header.rows, header.cols), data.into_iter().map(|v| v as f64).collect())
            .map_err(|e| ClusterError::Malformed(e.to_string()))?;
        for mut row in probs.rows_mut() {
            let s = row.sum();
            if !(s > 0.0) {
                return Err(ClusterError::Malformed("row with zero mass".into()));
            }
            row /= s;
        }
        Self::from_probs(ids, probs)
    }

    /// Rows restricted to `keep`, in this assignment's order.
    pub fn select(&self, keep: &std::collections::BTreeSet<String>) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.ids[i])).collect();
        SoftAssignment {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            probs: self.probs.select(Axis(0), &rows),
            hard_labels: rows.iter().map(|&i| self.hard_labels[i]).collect(),
            confidence: rows.iter().map(|&i| self.confidence[i]).collect(),
        }
    }
}

/// Index and value of the maximum; the lowest index wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn embeddings_f64(emb: &EmbeddingMatrix) -> Array2<f64> {
    emb.vectors.mapv(|v| v as f64)
}

/// Applies the head and softmax to every embedding row.
pub fn assign(head: &ClusterHead, emb: &EmbeddingMatrix) -> Result<SoftAssignment, ClusterError> {
    if emb.dim() != head.dim {
        return Err(ClusterError::DimensionMismatch(format!(
            "head expects {} inputs, embeddings have {}",
            head.dim,
            emb.dim()
        )));
    }
    let logits = head.logits(embeddings_f64(emb).view());
    SoftAssignment::from_probs(emb.ids.clone(), loss::softmax_rows(logits.view()))
}

/// `(image_id, hard_label)` for every row with `confidence ≥ threshold`.
pub fn select_confident(assignment: &SoftAssignment, threshold: f64) -> Vec<(String, usize)> {
    (0..assignment.len())
        .filter(|&i| assignment.confidence[i] >= threshold)
        .map(|i| (assignment.ids[i].clone(), assignment.hard_labels[i]))
        .collect()
}

/// Number of clusters that received at least one sample.
pub fn filled_clusters(assignment: &SoftAssignment) -> usize {
    let mut used = vec![false; assignment.num_clusters()];
    for &l in &assignment.hard_labels {
        used[l] = true;
    }
    used.into_iter().filter(|&u| u).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn emb(rows: Array2<f32>) -> EmbeddingMatrix {
        let ids = (0..rows.nrows()).map(|i| format!("x{i}")).collect();
        EmbeddingMatrix::new(ids, rows, false).unwrap()
    }

    #[test]
    fn zero_head_is_uniform() {
        let cfg = ClusterHeadConfig { num_clusters: 4, ..Default::default() };
        let a = assign(&ClusterHead::zeros(3, &cfg), &emb(array![[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]])).unwrap();
        assert!(a.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(a.confidence.iter().all(|&c| (c - 0.25).abs() < 1e-15));
        assert_eq!(a.hard_labels, vec![0, 0]);
    }

    #[test]
    fn dominant_bias_wins() {
        let cfg = ClusterHeadConfig { num_clusters: 5, ..Default::default() };
        let mut h = ClusterHead::random(2, &cfg);
        let c = h.num_clusters();
        h.params[c * 2 + 3] = 100.0;
        let a = assign(&h, &emb(array![[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]])).unwrap();
        assert_eq!(a.hard_labels, vec![3, 3, 3]);
    }

    #[test]
    fn dimension_mismatch() {
        let h = ClusterHead::zeros(4, &ClusterHeadConfig::default());
        assert!(matches!(assign(&h, &emb(array![[1.0, 0.0]])), Err(ClusterError::DimensionMismatch(_))));
    }

    #[test]
    fn confident_selection_is_inclusive() {
        let a = SoftAssignment::from_probs(
            vec!["a".into(), "b".into(), "c".into()],
            array![[0.995, 0.005], [0.99, 0.01], [0.015, 0.985]],
        )
        .unwrap();
        assert_eq!(select_confident(&a, 0.99), vec![("a".to_string(), 0), ("b".to_string(), 0)]);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax([0.25, 0.5, 0.5].into_iter()), (1, 0.5));
    }

    #[test]
    fn filled_cluster_count() {
        let ids = (0..4).map(|i| i.to_string()).collect();
        let a = SoftAssignment::one_hot(ids, &[0, 2, 4, 2], 5).unwrap();
        assert_eq!(filled_clusters(&a), 3);
    }

    #[test]
    fn artifacts_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = SoftAssignment::from_probs(vec!["p".into(), "q".into()], array![[0.2, 0.8], [0.6, 0.4]]).unwrap();
        a.save(&dir.path().join("a.json")).unwrap();
        let back = SoftAssignment::load(&dir.path().join("a.json")).unwrap();
        assert_eq!(back.hard_labels, a.hard_labels);
        assert!(back.probs.iter().zip(a.probs.iter()).all(|(x, y)| (x - y).abs() < 1e-7));
        let tsv = std::fs::read_to_string(dir.path().join("a.labels.tsv")).unwrap();
        assert!(tsv.contains("p\t1\t0.800000"));

        let cfg = ClusterHeadConfig { num_clusters: 3, ..Default::default() };
        let h = ClusterHead::random(4, &cfg);
        h.save(&dir.path().join("h.blob")).unwrap();
        assert_eq!(ClusterHead::load(&dir.path().join("h.blob")).unwrap(), h);
    }

    #[test]
    fn config_validation() {
        assert!(ClusterHeadConfig::default().validate().is_ok());
        for bad in [
            ClusterHeadConfig { num_clusters: 1, ..Default::default() },
            ClusterHeadConfig { lambda: -1.0, ..Default::default() },
            ClusterHeadConfig { log_clamp: 1e-3, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn rows_sum_to_one(seed in 0u64..10_000, c in 2usize..12, d in 1usize..8) {
            let cfg = ClusterHeadConfig { num_clusters: c, seed, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = ClusterHead::random(d, &cfg);
            for p in h.params.iter_mut() { *p *= rng.random_range(0.1f32..20.0); }
            let x = Array2::from_shape_fn((7, d), |_| rng.random_range(-3.0f32..3.0));
            let a = assign(&h, &emb(x)).unwrap();
            for row in a.probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn selection_matches_brute_force(conf in proptest::collection::vec(0.3f64..1.0, 1..40), t in 0.51f64..1.0) {
            let ids: Vec<String> = (0..conf.len()).map(|i| i.to_string()).collect();
            let probs = Array2::from_shape_fn((conf.len(), 2), |(i, j)| if j == 0 { conf[i].max(0.5) } else { 1.0 - conf[i].max(0.5) });
            let a = SoftAssignment::from_probs(ids, probs).unwrap();
            let mut brute = Vec::new();
            for i in 0..a.len() {
                if a.confidence[i] >= t { brute.push((a.ids[i].clone(), a.hard_labels[i])); }
            }
            prop_assert_eq!(select_confident(&a, t), brute);
        }
    }
}
