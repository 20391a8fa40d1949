//! Cross-entropy retraining on confidently assigned samples.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assign, select_confident, ClusterError, ClusterHead, SoftAssignment};
use crate::data::DatasetManifest;
use crate::derive_seed;
use crate::nn::{l2_normalize, l2_normalize_backward, Adam};
use crate::raster::Raster;
use crate::ssl::embed::load_rasters;
use crate::ssl::{embed_rasters, AugmentationPolicy, Backbone, EncoderState, Strength};

const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfLabelConfig {
    pub threshold: f64,
    pub strong_policy: AugmentationPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub update_encoder: bool,
    pub update_head: bool,
    /// Weight each confident sample inversely to its cluster's confident count.
    pub class_balance: bool,
}

impl Default for SelfLabelConfig {
    fn default() -> Self {
        SelfLabelConfig {
            threshold: 0.99,
            strong_policy: AugmentationPolicy::strong(),
            epochs: 5,
            batch_size: 128,
            learning_rate: 1e-4,
            seed: 0,
            update_encoder: true,
            update_head: true,
            class_balance: false,
        }
    }
}

impl SelfLabelConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if !(self.threshold > 0.5 && self.threshold <= 1.0) {
            return Err(ClusterError::InvalidConfig(format!("threshold {} must lie in (0.5, 1]", self.threshold)));
        }
        if self.strong_policy.strength != Strength::Strong {
            return Err(ClusterError::InvalidConfig("self-labeling needs a strong augmentation policy".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(ClusterError::InvalidConfig("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfLabelEpoch {
    pub epoch: usize,
    pub confident: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct SelfLabelOutcome {
    pub encoder: EncoderState,
    pub head: ClusterHead,
    pub assignment: SoftAssignment,
    pub log: Vec<SelfLabelEpoch>,
}

struct Grads {
    encoder: Vec<f32>,
    head: Vec<f64>,
    loss: f64,
}

/// Cross-entropy of one view against `label`, scaled by `scale`; accumulates
/// head gradients (weights then biases) and, when given, encoder gradients.
#[allow(clippy::too_many_arguments)]
fn sample_grad(
    backbone: &Backbone,
    weights: &[f32],
    w: &Array2<f64>,
    bias: &[f64],
    view: &Raster,
    label: usize,
    scale: f64,
    encoder_grads: Option<&mut [f32]>,
    head_grads: &mut [f64],
) -> f64 {
    let (c, d) = w.dim();
    let (h, cache) = backbone.forward(weights, view);
    let (u, norm) = l2_normalize(&h);
    let z: Vec<f64> = (0..c).map(|k| bias[k] + (0..d).map(|j| w[[k, j]] * u[j] as f64).sum::<f64>()).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let dz: Vec<f64> = (0..c).map(|k| ((z[k] - lse).exp() - (k == label) as u8 as f64) * scale).collect();
    for k in 0..c {
        for j in 0..d {
            head_grads[k * d + j] += dz[k] * u[j] as f64;
        }
        head_grads[c * d + k] += dz[k];
    }
    if let Some(grads) = encoder_grads {
        let du: Vec<f32> = (0..d).map(|j| (0..c).map(|k| w[[k, j]] * dz[k]).sum::<f64>() as f32).collect();
        let dh = l2_normalize_backward(&u, norm, &du);
        backbone.backward(weights, &cache, &dh, grads);
    }
    (lse - z[label]) * scale
}

/// Per-cluster loss weights; mean weight over the confident set is 1.
fn class_weights(confident: &[(usize, usize)], c: usize, balance: bool) -> Vec<f64> {
    if !balance {
        return vec![1.0; c];
    }
    let mut counts = vec![0usize; c];
    confident.iter().for_each(|&(_, l)| counts[l] += 1);
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { confident.len() as f64 / (present * n as f64) })
        .collect()
}

/// Retrains on `images` (aligned with `ids`) and returns the final assignment of all of them.
pub fn self_label_train_rasters(
    encoder: &EncoderState,
    head: &ClusterHead,
    ids: &[String],
    images: &[Raster],
    cfg: &SelfLabelConfig,
) -> Result<SelfLabelOutcome, ClusterError> {
    cfg.validate()?;
    if ids.len() != images.len() {
        return Err(ClusterError::DimensionMismatch(format!("{} ids for {} images", ids.len(), images.len())));
    }
    let mut encoder = encoder.clone();
    let mut head = head.clone();
    let backbone = encoder.config.backbone();
    let size = backbone.input_size();
    let images: Vec<Raster> = images.iter().map(|r| if r.width == size && r.height == size { r.clone() } else { r.resized(size) }).collect();
    let mut enc_opt = Adam::new(encoder.weights.len(), 0.0);
    let mut head_opt = Adam::new(head.params.len(), 0.0);
    let row_of: std::collections::HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let current = assign(&head, &embed_rasters(&encoder, ids.to_vec(), &images)?)?;
        let mut confident: Vec<(usize, usize)> = select_confident(&current, cfg.threshold)
            .into_iter()
            .map(|(id, label)| (row_of[id.as_str()], label))
            .collect();
        if confident.is_empty() {
            if epoch == 0 {
                return Err(ClusterError::NoConfidentSamples(cfg.threshold));
            }
            log::info!("self-label epoch {epoch}: no confident samples left, stopping");
            break;
        }
        let weight = class_weights(&confident, head.num_clusters(), cfg.class_balance);
        confident.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, 0x5e1f])));
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in confident.chunks(cfg.batch_size) {
            let norm = 1.0 / batch.len() as f64;
            let w = head.weights().mapv(|v| v as f64);
            let bias: Vec<f64> = head.bias().iter().map(|&v| v as f64).collect();
            let parts: Vec<Grads> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = Grads { encoder: vec![0.0; encoder.weights.len()], head: vec![0.0; head.params.len()], loss: 0.0 };
                    for &(row, label) in chunk {
                        let seed = derive_seed(&[cfg.seed, epoch as u64, row as u64]);
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let view = cfg.strong_policy.apply(&images[row], &mut rng);
                        let enc_grads = cfg.update_encoder.then_some(&mut g.encoder[..]);
                        let scale = norm * weight[label];
                        g.loss += sample_grad(&backbone, &encoder.weights, &w, &bias, &view, label, scale, enc_grads, &mut g.head);
                    }
                    g
                })
                .collect();
            let mut enc_grad = vec![0.0f32; encoder.weights.len()];
            let mut head_grad = vec![0.0f64; head.params.len()];
            for p in parts {
                enc_grad.iter_mut().zip(&p.encoder).for_each(|(t, v)| *t += v);
                head_grad.iter_mut().zip(&p.head).for_each(|(t, v)| *t += v);
                loss_sum += p.loss;
            }
            if cfg.update_head {
                let g: Vec<f32> = head_grad.iter().map(|&v| v as f32).collect();
                head_opt.update(&mut head.params, &g, cfg.learning_rate);
            }
            if cfg.update_encoder {
                enc_opt.update(&mut encoder.weights, &enc_grad, cfg.learning_rate);
            }
            steps += 1;
        }
        let entry = SelfLabelEpoch { epoch, confident: confident.len(), loss: loss_sum / steps.max(1) as f64 };
        log::info!("self-label epoch {epoch}: {} confident, loss {:.4}", entry.confident, entry.loss);
        log.push(entry);
    }
    let assignment = assign(&head, &embed_rasters(&encoder, ids.to_vec(), &images)?)?;
    Ok(SelfLabelOutcome { encoder, head, assignment, log })
}

/// Loads the manifest images and runs [`self_label_train_rasters`].
pub fn self_label_train(
    encoder: &EncoderState,
    head: &ClusterHead,
    manifest: &DatasetManifest,
    cfg: &SelfLabelConfig,
) -> Result<SelfLabelOutcome, ClusterError> {
    let images = load_rasters(manifest, encoder.config.input_size)?;
    let ids: Vec<String> = manifest.records.iter().map(|r| r.image_id.clone()).collect();
    self_label_train_rasters(encoder, head, &ids, &images, cfg)
}
