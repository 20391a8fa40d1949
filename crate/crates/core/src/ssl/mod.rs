//! Self-supervised representation learning and corpus embedding.

pub mod augment;
pub mod embed;
pub mod loss;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{Blob, BlobError};
use crate::nn::conv::ConvCache;
use crate::nn::transformer::TransformerCache;
use crate::nn::{ConvResNet, Mlp, PatchTransformer};
use crate::raster::Raster;

pub use augment::{augment, AugmentationPolicy, Strength};
pub use embed::{embed, embed_rasters, EmbeddingMatrix};
pub use loss::{contrastive_loss, contrastive_loss_grad, self_distillation_loss, update_center};
pub use train::{train_ssl, SslTrainer};

#[derive(Debug, Error)]
pub enum SslError {
    #[error("batch of {0} is too small; the contrastive objective needs at least 2")]
    BatchTooSmall(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("image {id} is missing or unreadable at {path}")]
    MissingImage { id: String, path: String },
    #[error("checkpoint was written for a different configuration")]
    CheckpointMismatch,
    #[error("checkpoint: {0}")]
    Blob(#[from] BlobError),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    SmallConvolutionalResidual,
    SmallPatchTransformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SslMethod {
    Contrastive,
    SelfDistillation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationConfig {
    pub out_dim: usize,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub teacher_momentum: f32,
    pub center_momentum: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig {
            out_dim: 256,
            teacher_temp: 0.04,
            student_temp: 0.1,
            teacher_momentum: 0.996,
            center_momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub topology: Topology,
    pub method: SslMethod,
    /// Side length images are resized to before entering the network.
    pub input_size: usize,
    /// Base channel count (convolutional) or token width (transformer).
    pub width: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub embedding_dim: usize,
    pub projection_dim: usize,
    pub temperature: f64,
    pub distance: Distance,
    pub distillation: DistillationConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            topology: Topology::SmallConvolutionalResidual,
            method: SslMethod::Contrastive,
            input_size: 32,
            width: 16,
            patch_size: 8,
            depth: 2,
            heads: 4,
            embedding_dim: 512,
            projection_dim: 128,
            temperature: 0.5,
            distance: Distance::Cosine,
            distillation: DistillationConfig::default(),
            epochs: 20,
            batch_size: 256,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn transformer() -> Self {
        EncoderConfig {
            topology: Topology::SmallPatchTransformer,
            width: 32,
            embedding_dim: 384,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SslError> {
        let bad = |m: String| Err(SslError::InvalidConfig(m));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.embedding_dim < 2 {
            return bad(format!("embedding_dim {} must be at least 2", self.embedding_dim));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.projection_dim < 1 || self.width < 1 {
            return bad("projection_dim and width must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        match self.topology {
            Topology::SmallConvolutionalResidual => {
                if self.input_size < 4 {
                    return bad(format!("input_size {} is too small", self.input_size));
                }
            }
            Topology::SmallPatchTransformer => {
                if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
                    return bad("input_size must be a multiple of patch_size".into());
                }
                if self.heads == 0 || self.width % self.heads != 0 || self.depth == 0 {
                    return bad("width must split evenly across a positive number of heads".into());
                }
            }
        }
        if self.method == SslMethod::SelfDistillation {
            let d = &self.distillation;
            if !(d.teacher_temp > 0.0 && d.student_temp > 0.0) || d.out_dim < 2 {
                return bad("distillation temperatures must be positive and out_dim ≥ 2".into());
            }
            if !(0.0..=1.0).contains(&d.teacher_momentum) || !(0.0..=1.0).contains(&d.center_momentum) {
                return bad("momentum values must lie in [0, 1]".into());
            }
        }
        Ok(())
    }

    pub fn backbone(&self) -> Backbone {
        match self.topology {
            Topology::SmallConvolutionalResidual => {
                Backbone::Conv(ConvResNet::new(self.input_size, self.width, self.embedding_dim))
            }
            Topology::SmallPatchTransformer => Backbone::Transformer(PatchTransformer::new(
                self.input_size,
                self.patch_size,
                self.width,
                self.depth,
                self.heads,
                self.embedding_dim,
            )),
        }
    }

    /// Projection head (contrastive) or distillation head.
    pub fn head(&self) -> Mlp {
        let d = self.embedding_dim;
        match self.method {
            SslMethod::Contrastive => Mlp::new(&[d, d, self.projection_dim]),
            SslMethod::SelfDistillation => Mlp::new(&[d, d, self.distillation.out_dim]),
        }
    }
}

/// Encoder network selected by [`Topology`].
#[derive(Clone, Debug)]
pub enum Backbone {
    Conv(ConvResNet),
    Transformer(PatchTransformer),
}

pub enum BackboneCache {
    Conv(ConvCache),
    Transformer(TransformerCache),
}

impl Backbone {
    pub fn num_params(&self) -> usize {
        match self {
            Backbone::Conv(n) => n.num_params(),
            Backbone::Transformer(n) => n.num_params(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Backbone::Conv(n) => n.input_size,
            Backbone::Transformer(n) => n.input_size,
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Backbone::Conv(n) => n.init(rng),
            Backbone::Transformer(n) => n.init(rng),
        }
    }

    pub fn forward(&self, params: &[f32], x: &Raster) -> (Vec<f32>, BackboneCache) {
        match self {
            Backbone::Conv(n) => {
                let (y, c) = n.forward(params, x);
                (y, BackboneCache::Conv(c))
            }
            Backbone::Transformer(n) => {
                let (y, c) = n.forward(params, x);
                (y, BackboneCache::Transformer(c))
            }
        }
    }

    pub fn backward(&self, params: &[f32], cache: &BackboneCache, grad_out: &[f32], grads: &mut [f32]) {
        match (self, cache) {
            (Backbone::Conv(n), BackboneCache::Conv(c)) => n.backward(params, c, grad_out, grads),
            (Backbone::Transformer(n), BackboneCache::Transformer(c)) => n.backward(params, c, grad_out, grads),
            _ => panic!("backbone cache does not match the network"),
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Trained (or freshly initialised) encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    /// Backbone parameters producing the embedding.
    pub weights: Vec<f32>,
    /// Projection or distillation head parameters.
    pub head_weights: Vec<f32>,
    pub training_log: Vec<EpochLog>,
}

pub const ENCODER_KIND: &str = "fusc-encoder";
pub const ENCODER_VERSION: u32 = 1;

impl EncoderState {
    pub fn initialize(config: &EncoderConfig) -> Result<Self, SslError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let weights = config.backbone().init(&mut rng);
        let head_weights = config.head().init(&mut rng);
        Ok(EncoderState { config: config.clone(), weights, head_weights, training_log: Vec::new() })
    }

    pub fn to_blob(&self) -> Blob {
        let meta = serde_json::json!({
            "version": ENCODER_VERSION,
            "config": self.config,
            "training_log": self.training_log,
        });
        Blob::new(ENCODER_KIND, meta)
            .with("backbone", self.weights.clone())
            .with("head", self.head_weights.clone())
    }

    pub fn from_blob(mut blob: Blob) -> Result<Self, SslError> {
        blob.expect_kind(ENCODER_KIND)?;
        let version = blob.meta.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != ENCODER_VERSION as u64 {
            return Err(SslError::Blob(BlobError::UnsupportedVersion {
                found: version as u32,
                expected: ENCODER_VERSION,
            }));
        }
        let config: EncoderConfig = serde_json::from_value(blob.meta["config"].clone())?;
        let training_log: Vec<EpochLog> = serde_json::from_value(blob.meta["training_log"].clone())?;
        let weights = blob.take("backbone")?;
        let head_weights = blob.take("head")?;
        if weights.len() != config.backbone().num_params() || head_weights.len() != config.head().num_params() {
            return Err(SslError::CheckpointMismatch);
        }
        Ok(EncoderState { config, weights, head_weights, training_log })
    }

    pub fn save(&self, path: &Path) -> Result<(), SslError> {
        Ok(self.to_blob().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, SslError> {
        Self::from_blob(Blob::load(path)?)
    }

    /// Unnormalised embedding of one image already at `input_size`.
    pub fn represent(&self, backbone: &Backbone, x: &Raster) -> Vec<f32> {
        backbone.forward(&self.weights, x).0
    }
}
