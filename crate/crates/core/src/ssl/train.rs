//! Pretext-task training loop with per-epoch checkpoints.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentationPolicy};
use super::embed::load_rasters;
use super::loss::{contrastive_loss_grad, self_distillation_loss, update_center};
use super::{Backbone, EncoderConfig, EncoderState, EpochLog, SslError, SslMethod};
use crate::blob::{Blob, BlobError};
use crate::data::DatasetManifest;
use crate::derive_seed;
use crate::nn::{cosine_lr, ema_update, Adam, Mlp};
use crate::raster::Raster;

pub const CHECKPOINT_KIND: &str = "fusc-ssl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
/// Samples per gradient accumulation chunk; fixed so sums do not depend on thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    config: EncoderConfig,
    policy: AugmentationPolicy,
    epochs_done: usize,
    step: usize,
    adam_steps: (u64, u64),
    center_bits: Vec<u64>,
    log: Vec<EpochLog>,
}

/// Resumable optimisation state for [`train_ssl`].
pub struct SslTrainer {
    config: EncoderConfig,
    policy: AugmentationPolicy,
    backbone: Backbone,
    head: Mlp,
    images: Vec<Raster>,
    student: Vec<f32>,
    student_head: Vec<f32>,
    opt_backbone: Adam,
    opt_head: Adam,
    teacher: Vec<f32>,
    teacher_head: Vec<f32>,
    center: Array1<f64>,
    epochs_done: usize,
    step: usize,
    log: Vec<EpochLog>,
    checkpoint: Option<PathBuf>,
}

struct Forward {
    cache: super::BackboneCache,
    head_cache: crate::nn::mlp::MlpCache,
    out: Vec<f32>,
}

impl SslTrainer {
    pub fn new(manifest: &DatasetManifest, config: &EncoderConfig, policy: &AugmentationPolicy) -> Result<Self, SslError> {
        if manifest.is_empty() {
            return Err(SslError::EmptyTrainSet);
        }
        config.validate()?;
        let images = load_rasters(manifest, config.input_size)?;
        Self::from_rasters(images, config, policy)
    }

    pub fn from_rasters(images: Vec<Raster>, config: &EncoderConfig, policy: &AugmentationPolicy) -> Result<Self, SslError> {
        if images.is_empty() {
            return Err(SslError::EmptyTrainSet);
        }
        if images.len() < 2 {
            return Err(SslError::BatchTooSmall(images.len()));
        }
        let init = EncoderState::initialize(config)?;
        let size = config.input_size;
        let images = images
            .into_iter()
            .map(|r| if r.width == size && r.height == size { r } else { r.resized(size) })
            .collect();
        let head = config.head();
        let out_dim = head.output_dim();
        Ok(SslTrainer {
            backbone: config.backbone(),
            head,
            images,
            opt_backbone: Adam::new(init.weights.len(), config.weight_decay),
            opt_head: Adam::new(init.head_weights.len(), config.weight_decay),
            teacher: init.weights.clone(),
            teacher_head: init.head_weights.clone(),
            student: init.weights,
            student_head: init.head_weights,
            center: Array1::zeros(out_dim),
            epochs_done: 0,
            step: 0,
            log: Vec::new(),
            checkpoint: None,
            config: config.clone(),
            policy: policy.clone(),
        })
    }

    /// Saves after every epoch to `path`, resuming from it first if it exists.
    pub fn with_checkpoint(mut self, path: &Path) -> Result<Self, SslError> {
        if path.exists() {
            self.restore(Blob::load(path)?)?;
        }
        self.checkpoint = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    fn steps_per_epoch(&self) -> usize {
        let n = self.images.len();
        let b = self.config.batch_size.min(n);
        let full = n / b;
        if n % b >= 2 {
            full + 1
        } else {
            full
        }
    }

    fn forward(&self, params: &[f32], head: &[f32], x: &Raster) -> Forward {
        let (h, cache) = self.backbone.forward(params, x);
        let (out, head_cache) = self.head.forward(head, &h);
        Forward { cache, head_cache, out }
    }

    /// Backward for one chunk of samples; returns (backbone grads, head grads).
    fn backward_chunk(&self, fwd: &[(Forward, Vec<f32>)]) -> (Vec<f32>, Vec<f32>) {
        let mut gb = vec![0.0f32; self.student.len()];
        let mut gh = vec![0.0f32; self.student_head.len()];
        for (f, g) in fwd {
            let dh = self.head.backward(&self.student_head, &f.head_cache, g, &mut gh);
            self.backbone.backward(&self.student, &f.cache, &dh, &mut gb);
        }
        (gb, gh)
    }

    fn apply_grads(&mut self, parts: Vec<(Vec<f32>, Vec<f32>)>, lr: f32) {
        let mut gb = vec![0.0f32; self.student.len()];
        let mut gh = vec![0.0f32; self.student_head.len()];
        for (b, h) in parts {
            gb.iter_mut().zip(&b).for_each(|(t, g)| *t += g);
            gh.iter_mut().zip(&h).for_each(|(t, g)| *t += g);
        }
        self.opt_backbone.update(&mut self.student, &gb, lr);
        self.opt_head.update(&mut self.student_head, &gh, lr);
    }

    fn contrastive_step(&mut self, batch: &[usize], epoch: usize, lr: f32) -> Result<f64, SslError> {
        let seed = self.config.seed;
        let views: Vec<(Forward, Forward)> = batch
            .par_iter()
            .map(|&i| {
                let (va, vb) = augment(&self.images[i], &self.policy, derive_seed(&[seed, epoch as u64, i as u64]));
                (self.forward(&self.student, &self.student_head, &va), self.forward(&self.student, &self.student_head, &vb))
            })
            .collect();
        let p = self.head.output_dim();
        let za = Array2::from_shape_fn((batch.len(), p), |(r, c)| views[r].0.out[c] as f64);
        let zb = Array2::from_shape_fn((batch.len(), p), |(r, c)| views[r].1.out[c] as f64);
        let out = contrastive_loss_grad(za.view(), zb.view(), self.config.temperature)?;
        let mut pairs = Vec::with_capacity(2 * batch.len());
        for (r, (fa, fb)) in views.into_iter().enumerate() {
            pairs.push((fa, out.grad_a.row(r).iter().map(|&g| g as f32).collect()));
            pairs.push((fb, out.grad_b.row(r).iter().map(|&g| g as f32).collect()));
        }
        let parts: Vec<_> = pairs.par_chunks(CHUNK).map(|c| self.backward_chunk(c)).collect();
        self.apply_grads(parts, lr);
        Ok(out.loss)
    }

    fn distillation_step(&mut self, batch: &[usize], epoch: usize, lr: f32) -> Result<f64, SslError> {
        let seed = self.config.seed;
        let dc = self.config.distillation.clone();
        let views: Vec<(Forward, Forward, Vec<f32>, Vec<f32>)> = batch
            .par_iter()
            .map(|&i| {
                let (va, vb) = augment(&self.images[i], &self.policy, derive_seed(&[seed, epoch as u64, i as u64]));
                let teach = |x: &Raster| self.head.forward(&self.teacher_head, &self.backbone.forward(&self.teacher, x).0).0;
                let (ta, tb) = (teach(&va), teach(&vb));
                (
                    self.forward(&self.student, &self.student_head, &va),
                    self.forward(&self.student, &self.student_head, &vb),
                    ta,
                    tb,
                )
            })
            .collect();
        let (b, p) = (batch.len(), self.head.output_dim());
        let sa = Array2::from_shape_fn((b, p), |(r, c)| views[r].0.out[c] as f64);
        let sb = Array2::from_shape_fn((b, p), |(r, c)| views[r].1.out[c] as f64);
        let ta = Array2::from_shape_fn((b, p), |(r, c)| views[r].2[c] as f64);
        let tb = Array2::from_shape_fn((b, p), |(r, c)| views[r].3[c] as f64);
        // each student view is matched against the teacher's other view
        let l1 = self_distillation_loss(sb.view(), ta.view(), &self.center, dc.teacher_temp, dc.student_temp)?;
        let l2 = self_distillation_loss(sa.view(), tb.view(), &self.center, dc.teacher_temp, dc.student_temp)?;
        let mut pairs = Vec::with_capacity(2 * b);
        for (r, (fa, fb, _, _)) in views.into_iter().enumerate() {
            pairs.push((fa, l2.grad_student.row(r).iter().map(|&g| 0.5 * g as f32).collect()));
            pairs.push((fb, l1.grad_student.row(r).iter().map(|&g| 0.5 * g as f32).collect()));
        }
        let parts: Vec<_> = pairs.par_chunks(CHUNK).map(|c| self.backward_chunk(c)).collect();
        self.apply_grads(parts, lr);
        ema_update(&mut self.teacher, &self.student, dc.teacher_momentum);
        ema_update(&mut self.teacher_head, &self.student_head, dc.teacher_momentum);
        let both = ndarray::concatenate(ndarray::Axis(0), &[ta.view(), tb.view()]).expect("same width");
        update_center(&mut self.center, both.view(), dc.center_momentum);
        Ok(0.5 * (l1.loss + l2.loss))
    }

    /// Runs one epoch and returns its mean batch loss.
    pub fn run_epoch(&mut self) -> Result<EpochLog, SslError> {
        let epoch = self.epochs_done;
        let n = self.images.len();
        let bsz = self.config.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, epoch as u64, 0x5eed])));
        let per_epoch = self.steps_per_epoch();
        let total = per_epoch * self.config.epochs;
        let warmup = per_epoch * self.config.warmup_epochs;
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(bsz).filter(|c| c.len() >= 2) {
            let lr = cosine_lr(self.config.learning_rate, self.step, total, warmup);
            let loss = match self.config.method {
                SslMethod::Contrastive => self.contrastive_step(batch, epoch, lr)?,
                SslMethod::SelfDistillation => self.distillation_step(batch, epoch, lr)?,
            };
            sum += loss;
            count += 1;
            self.step += 1;
        }
        let entry = EpochLog { epoch, loss: sum / count.max(1) as f64 };
        log::info!("ssl epoch {epoch}: loss {:.5}", entry.loss);
        self.log.push(entry.clone());
        self.epochs_done += 1;
        if let Some(path) = &self.checkpoint {
            self.to_blob().save(path)?;
        }
        Ok(entry)
    }

    /// Trains until `config.epochs` epochs are done.
    pub fn run(mut self) -> Result<EncoderState, SslError> {
        while self.epochs_done < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(self.state())
    }

    /// Current encoder; for self-distillation this is the teacher network.
    pub fn state(&self) -> EncoderState {
        let (weights, head_weights) = match self.config.method {
            SslMethod::Contrastive => (self.student.clone(), self.student_head.clone()),
            SslMethod::SelfDistillation => (self.teacher.clone(), self.teacher_head.clone()),
        };
        EncoderState { config: self.config.clone(), weights, head_weights, training_log: self.log.clone() }
    }

    fn to_blob(&self) -> Blob {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            policy: self.policy.clone(),
            epochs_done: self.epochs_done,
            step: self.step,
            adam_steps: (self.opt_backbone.step, self.opt_head.step),
            center_bits: self.center.iter().map(|c| c.to_bits()).collect(),
            log: self.log.clone(),
        };
        Blob::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("serializable"))
            .with("student", self.student.clone())
            .with("student_head", self.student_head.clone())
            .with("teacher", self.teacher.clone())
            .with("teacher_head", self.teacher_head.clone())
            .with("adam_backbone_m", self.opt_backbone.m.clone())
            .with("adam_backbone_v", self.opt_backbone.v.clone())
            .with("adam_head_m", self.opt_head.m.clone())
            .with("adam_head_v", self.opt_head.v.clone())
    }

    fn restore(&mut self, mut blob: Blob) -> Result<(), SslError> {
        blob.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(blob.meta.clone())?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(SslError::Blob(BlobError::UnsupportedVersion {
                found: meta.version,
                expected: CHECKPOINT_VERSION,
            }));
        }
        if meta.config != self.config || meta.policy != self.policy {
            return Err(SslError::CheckpointMismatch);
        }
        let take = |blob: &mut Blob, name: &str, len: usize| -> Result<Vec<f32>, SslError> {
            let v = blob.take(name)?;
            if v.len() != len {
                return Err(SslError::CheckpointMismatch);
            }
            Ok(v)
        };
        let (nb, nh) = (self.student.len(), self.student_head.len());
        self.student = take(&mut blob, "student", nb)?;
        self.student_head = take(&mut blob, "student_head", nh)?;
        self.teacher = take(&mut blob, "teacher", nb)?;
        self.teacher_head = take(&mut blob, "teacher_head", nh)?;
        self.opt_backbone.m = take(&mut blob, "adam_backbone_m", nb)?;
        self.opt_backbone.v = take(&mut blob, "adam_backbone_v", nb)?;
        self.opt_head.m = take(&mut blob, "adam_head_m", nh)?;
        self.opt_head.v = take(&mut blob, "adam_head_v", nh)?;
        self.opt_backbone.step = meta.adam_steps.0;
        self.opt_head.step = meta.adam_steps.1;
        if meta.center_bits.len() != self.center.len() {
            return Err(SslError::CheckpointMismatch);
        }
        self.center = meta.center_bits.iter().map(|&b| f64::from_bits(b)).collect();
        self.epochs_done = meta.epochs_done;
        self.step = meta.step;
        self.log = meta.log;
        Ok(())
    }
}

/// Trains an encoder on every record of `manifest`.
pub fn train_ssl(
    manifest: &DatasetManifest,
    config: &EncoderConfig,
    policy: &AugmentationPolicy,
) -> Result<EncoderState, SslError> {
    SslTrainer::new(manifest, config, policy)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetManifest;
    use crate::ssl::Topology;

    fn images(n: usize) -> Vec<Raster> {
        (0..n)
            .map(|k| {
                let data = (0..64)
                    .map(|i| {
                        let (x, y) = ((i % 8) as f32, (i / 8) as f32);
                        if k % 2 == 0 {
                            ((x - 3.5).abs() < 1.5) as u8 as f32 * 0.8 + 0.05 * (k % 5) as f32
                        } else {
                            ((y - 3.5).abs() < 1.5) as u8 as f32 * 0.8 + 0.05 * (k % 3) as f32
                        }
                    })
                    .collect();
                Raster::new(8, 8, data)
            })
            .collect()
    }

    fn cfg(method: SslMethod) -> EncoderConfig {
        EncoderConfig {
            method,
            input_size: 8,
            width: 2,
            embedding_dim: 8,
            projection_dim: 4,
            epochs: 2,
            batch_size: 6,
            distillation: crate::ssl::DistillationConfig { out_dim: 6, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn empty_manifest_rejected() {
        let m = DatasetManifest::new(vec![]);
        let r = train_ssl(&m, &cfg(SslMethod::Contrastive), &AugmentationPolicy::standard());
        assert!(matches!(r, Err(SslError::EmptyTrainSet)));
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        for method in [SslMethod::Contrastive, SslMethod::SelfDistillation] {
            let run = || {
                SslTrainer::from_rasters(images(14), &cfg(method), &AugmentationPolicy::standard())
                    .unwrap()
                    .run()
                    .unwrap()
            };
            let (a, b) = (run(), run());
            assert_eq!(a.training_log.len(), 2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ssl.ckpt");
        let c = cfg(SslMethod::SelfDistillation);
        let p = AugmentationPolicy::standard();
        let straight = SslTrainer::from_rasters(images(10), &c, &p).unwrap().run().unwrap();
        let mut first = SslTrainer::from_rasters(images(10), &c, &p).unwrap().with_checkpoint(&path).unwrap();
        first.run_epoch().unwrap();
        drop(first);
        let resumed = SslTrainer::from_rasters(images(10), &c, &p).unwrap().with_checkpoint(&path).unwrap();
        assert_eq!(resumed.epochs_done(), 1);
        assert_eq!(resumed.run().unwrap(), straight);
    }

    #[test]
    fn checkpoint_for_other_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ssl.ckpt");
        let p = AugmentationPolicy::standard();
        let mut t = SslTrainer::from_rasters(images(6), &cfg(SslMethod::Contrastive), &p).unwrap().with_checkpoint(&path).unwrap();
        t.run_epoch().unwrap();
        let other = EncoderConfig { seed: 9, ..cfg(SslMethod::Contrastive) };
        let r = SslTrainer::from_rasters(images(6), &other, &p).unwrap().with_checkpoint(&path);
        assert!(matches!(r, Err(SslError::CheckpointMismatch)));
    }

    #[test]
    fn transformer_topology_trains() {
        let c = EncoderConfig {
            topology: Topology::SmallPatchTransformer,
            patch_size: 4,
            width: 4,
            heads: 2,
            depth: 1,
            epochs: 1,
            ..cfg(SslMethod::Contrastive)
        };
        let s = SslTrainer::from_rasters(images(6), &c, &AugmentationPolicy::standard()).unwrap().run().unwrap();
        assert!(s.training_log[0].loss.is_finite());
    }
}
