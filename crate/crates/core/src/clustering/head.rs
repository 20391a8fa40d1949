//! Minibatch training of the cluster head on mined neighbours.

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::lloyd_restarts;
use super::loss::fusc_loss_logits;
use super::{assign, embeddings_f64, filled_clusters, ClusterError, ClusterHead, ClusterHeadConfig, HeadInit, SoftAssignment};
use crate::derive_seed;
use crate::neighbors::NeighborIndex;
use crate::nn::{l2_normalize, l2_normalize_backward, Adam};
use crate::raster::Raster;
use crate::ssl::{embed_rasters, EmbeddingMatrix, EncoderState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEpochLog {
    pub epoch: usize,
    pub total: f64,
    pub consistency: f64,
    pub entropy: f64,
    pub filled_clusters: usize,
}

#[derive(Clone, Debug)]
pub struct HeadTraining {
    pub head: ClusterHead,
    pub assignment: SoftAssignment,
    pub log: Vec<HeadEpochLog>,
}

fn batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, 0xc1])));
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

fn step_head(head: &mut ClusterHead, opt: &mut Adam, grads: &[f64]) {
    let g: Vec<f32> = grads.iter().map(|&v| v as f32).collect();
    let lr = head.config.learning_rate;
    opt.update(&mut head.params, &g, lr);
}

fn check_alignment(emb: &EmbeddingMatrix, index: &NeighborIndex) -> Result<(), ClusterError> {
    if index.ids != emb.ids || index.k == 0 {
        return Err(ClusterError::IndexEmbeddingMismatch);
    }
    Ok(())
}

fn log_epoch(epoch: usize, sums: (f64, f64, f64), steps: usize, assignment: &SoftAssignment) -> HeadEpochLog {
    let s = steps.max(1) as f64;
    let entry = HeadEpochLog {
        epoch,
        total: sums.0 / s,
        consistency: sums.1 / s,
        entropy: sums.2 / s,
        filled_clusters: filled_clusters(assignment),
    };
    log::info!(
        "head epoch {epoch}: total {:.4} consistency {:.4} entropy {:.4} filled {}",
        entry.total,
        entry.consistency,
        entry.entropy,
        entry.filled_clusters
    );
    entry
}

const INIT_RESTARTS: usize = 10;

fn initial_head(x: &Array2<f64>, cfg: &ClusterHeadConfig) -> Result<ClusterHead, ClusterError> {
    match cfg.init {
        HeadInit::Random => Ok(ClusterHead::random(x.ncols(), cfg)),
        HeadInit::Kmeans => {
            let (n, c, d) = (x.nrows(), cfg.num_clusters, x.ncols());
            if c > n {
                return Err(ClusterError::CGreaterThanN { c, n });
            }
            let (_, centers, _) = lloyd_restarts(x, c, derive_seed(&[cfg.seed, 0x1d17]), INIT_RESTARTS);
            let mut head = ClusterHead::zeros(d, cfg);
            for (k, row) in centers.rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt().max(1e-12);
                for (j, v) in row.iter().enumerate() {
                    head.params[k * d + j] = (cfg.init_scale * v / norm) as f32;
                }
            }
            Ok(head)
        }
    }
}

/// Trains a head on frozen embeddings; `index` must be mined on the same rows.
pub fn train_cluster_head(
    emb: &EmbeddingMatrix,
    index: &NeighborIndex,
    cfg: &ClusterHeadConfig,
) -> Result<HeadTraining, ClusterError> {
    cfg.validate()?;
    check_alignment(emb, index)?;
    let (head, log) = train_head_frozen(&embeddings_f64(emb), index, cfg)?;
    let assignment = assign(&head, emb)?;
    Ok(HeadTraining { head, assignment, log })
}

fn train_head_frozen(
    x: &Array2<f64>,
    index: &NeighborIndex,
    cfg: &ClusterHeadConfig,
) -> Result<(ClusterHead, Vec<HeadEpochLog>), ClusterError> {
    let (k, c) = (index.k, cfg.num_clusters);
    let mut head = initial_head(x, cfg)?;
    let mut opt = Adam::new(head.params.len(), cfg.weight_decay);
    let opts = cfg.loss_options();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0);
        let list = batches(x.nrows(), cfg.batch_size, cfg.seed, epoch);
        for batch in &list {
            let b = batch.len();
            let xa = x.select(Axis(0), batch);
            let nidx: Vec<usize> = batch.iter().flat_map(|&i| index.neighbors[i].iter().copied()).collect();
            let xn = x.select(Axis(0), &nidx);
            let la = head.logits(xa.view());
            let ln = head.logits(xn.view()).into_shape_with_order((b, k, c)).expect("gathered rows");
            let out = fusc_loss_logits(la.view(), ln.view(), &opts)?;
            let mut grads = vec![0.0f64; head.params.len()];
            head.accumulate_grad(xa.view(), out.grad_anchor.view(), &mut grads);
            let gn = out.grad_neighbors.into_shape_with_order((b * k, c)).expect("flat");
            head.accumulate_grad(xn.view(), gn.view(), &mut grads);
            step_head(&mut head, &mut opt, &grads);
            sums.0 += out.loss.total;
            sums.1 += out.loss.consistency;
            sums.2 += out.loss.entropy;
        }
        let probs = super::loss::softmax_rows(head.logits(x.view()).view());
        let assignment = SoftAssignment::from_probs(index.ids.clone(), probs)?;
        log.push(log_epoch(epoch, sums, list.len(), &assignment));
    }
    Ok((head, log))
}

/// Trains head and encoder jointly; `images` are aligned with `index.ids`.
pub fn train_cluster_head_finetune(
    encoder: &EncoderState,
    images: &[Raster],
    index: &NeighborIndex,
    cfg: &ClusterHeadConfig,
) -> Result<(EncoderState, HeadTraining), ClusterError> {
    cfg.validate()?;
    if images.len() != index.len() {
        return Err(ClusterError::IndexEmbeddingMismatch);
    }
    let mut encoder = encoder.clone();
    let backbone = encoder.config.backbone();
    let size = backbone.input_size();
    let images: Vec<Raster> = images.iter().map(|r| if r.width == size && r.height == size { r.clone() } else { r.resized(size) }).collect();
    let (k, c, d) = (index.k, cfg.num_clusters, encoder.config.embedding_dim);
    let mut head = initial_head(&embeddings_f64(&embed_rasters(&encoder, index.ids.clone(), &images)?), cfg)?;
    let mut opt = Adam::new(head.params.len(), cfg.weight_decay);
    let mut enc_opt = Adam::new(encoder.weights.len(), 0.0);
    let opts = cfg.loss_options();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0);
        let list = batches(images.len(), cfg.batch_size, cfg.seed, epoch);
        for batch in &list {
            let b = batch.len();
            // anchors first, then each anchor's neighbours in order
            let rows: Vec<usize> = batch.iter().copied().chain(batch.iter().flat_map(|&i| index.neighbors[i].iter().copied())).collect();
            let fwd: Vec<_> = rows
                .par_iter()
                .map(|&i| {
                    let (h, cache) = backbone.forward(&encoder.weights, &images[i]);
                    let (u, norm) = l2_normalize(&h);
                    (u, norm, cache)
                })
                .collect();
            let x = Array2::from_shape_fn((rows.len(), d), |(r, j)| fwd[r].0[j] as f64);
            let logits = head.logits(x.view());
            let la = logits.slice(ndarray::s![..b, ..]).to_owned();
            let ln: Array3<f64> = logits.slice(ndarray::s![b.., ..]).to_owned().into_shape_with_order((b, k, c)).expect("rows");
            let out = fusc_loss_logits(la.view(), ln.view(), &opts)?;
            let mut g = Array2::<f64>::zeros((rows.len(), c));
            g.slice_mut(ndarray::s![..b, ..]).assign(&out.grad_anchor);
            g.slice_mut(ndarray::s![b.., ..]).assign(&out.grad_neighbors.into_shape_with_order((b * k, c)).expect("flat"));
            let mut grads = vec![0.0f64; head.params.len()];
            head.accumulate_grad(x.view(), g.view(), &mut grads);
            let dx = g.dot(&head.weights().mapv(|v| v as f64));
            let parts: Vec<Vec<f32>> = fwd
                .par_chunks(8)
                .enumerate()
                .map(|(ci, chunk)| {
                    let mut acc = vec![0.0f32; encoder.weights.len()];
                    for (off, (u, norm, cache)) in chunk.iter().enumerate() {
                        let r = ci * 8 + off;
                        let du: Vec<f32> = dx.row(r).iter().map(|&v| v as f32).collect();
                        let dh = l2_normalize_backward(u, *norm, &du);
                        backbone.backward(&encoder.weights, cache, &dh, &mut acc);
                    }
                    acc
                })
                .collect();
            let enc_grad = crate::nn::sum_grads(parts, encoder.weights.len());
            step_head(&mut head, &mut opt, &grads);
            enc_opt.update(&mut encoder.weights, &enc_grad, cfg.encoder_learning_rate);
            sums.0 += out.loss.total;
            sums.1 += out.loss.consistency;
            sums.2 += out.loss.entropy;
        }
        let emb = embed_rasters(&encoder, index.ids.clone(), &images)?;
        log.push(log_epoch(epoch, sums, list.len(), &assign(&head, &emb)?));
    }
    let emb = embed_rasters(&encoder, index.ids.clone(), &images)?;
    let assignment = assign(&head, &emb)?;
    Ok((encoder, HeadTraining { head, assignment, log }))
}
