//! Staged, resumable runs over one run directory.
//!
//! Layout: `<run_root>/<name>/<stage>/`, one directory per stage holding its
//! artifacts and a `stage.json` record with a fingerprint of everything the
//! stage consumed and a content hash of every file it produced. A stage whose
//! record matches the current fingerprint and whose files still hash the same
//! is skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::{write_atomic, BlobError};
use crate::clustering::{
    assign, filled_clusters, kmeans, self_label_train_rasters, train_cluster_head, train_cluster_head_finetune,
    ClusterError, ClusterHead, ClusterHeadConfig, SelfLabelConfig, SoftAssignment,
};
use crate::data::{load_manifest, split_by_patient, DataError, DatasetManifest, Split, ViewLabel};
use crate::evaluate::{evaluate, EvalError, EvaluationReport};
use crate::neighbors::{mine_neighbors, neighbor_label_agreement, NeighborError, NeighborIndex};
use crate::preprocess::{
    load_text_sidecar, preprocess_corpus, AliasTable, InpaintConfig, PreprocessError, TextMask,
};
use crate::raster::Raster;
use crate::ssl::embed::load_rasters;
use crate::ssl::{
    embed, embed_rasters, AugmentationPolicy, EmbeddingMatrix, EncoderConfig, EncoderState, SslError, SslTrainer,
};

pub const CONFIG_VERSION: u32 = 1;

/// Overrides [`RunConfig::run_root`] when set.
pub const RUN_ROOT_ENV: &str = "FUSC_RUN_ROOT";

const RECORD: &str = "stage.json";
const CHECKPOINT: &str = "checkpoint.blob";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage} needs the {needs} artifacts in {path}, which are missing or out of date")]
    MissingArtifact { stage: Stage, needs: Stage, path: PathBuf },
    #[error("config version {found} is not supported (expected {expected})")]
    ConfigVersionMismatch { found: u32, expected: u32 },
    #[error("image {0} is not in the manifest")]
    IdMismatch(String),
    #[error("checkpoint {0} not found")]
    MissingCheckpoint(PathBuf),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Preprocess,
    Pretrain,
    Embed,
    Mine,
    Cluster,
    Selflabel,
    Kmeans,
    Evaluate,
    Export,
}

impl Stage {
    /// Every stage, in execution order.
    pub const ALL: [Stage; 9] = [
        Stage::Preprocess,
        Stage::Pretrain,
        Stage::Embed,
        Stage::Mine,
        Stage::Cluster,
        Stage::Selflabel,
        Stage::Kmeans,
        Stage::Evaluate,
        Stage::Export,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Pretrain => "pretrain",
            Stage::Embed => "embed",
            Stage::Mine => "mine",
            Stage::Cluster => "cluster",
            Stage::Selflabel => "selflabel",
            Stage::Kmeans => "kmeans",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    #[default]
    Test,
    Train,
    All,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Test => "test",
            EvalSplit::Train => "train",
            EvalSplit::All => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMeansSource {
    #[default]
    Pixels,
    Embeddings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub text_sidecar: Option<PathBuf>,
    pub alias_table: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: PathBuf::from("manifest.jsonl"),
            text_sidecar: None,
            alias_table: None,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborConfig {
    pub k: usize,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        NeighborConfig { k: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub source: KMeansSource,
    /// Defaults to the clustering stage's cluster count.
    pub num_clusters: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub split: EvalSplit,
    pub merge: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralizeConfig {
    pub text_sidecar: Option<PathBuf>,
    /// Views left out of the external evaluation.
    pub exclude_labels: Vec<ViewLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    pub run_root: PathBuf,
    pub data: DataConfig,
    pub preprocess: InpaintConfig,
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationPolicy,
    pub neighbors: NeighborConfig,
    pub cluster: ClusterHeadConfig,
    /// Replaces `cluster.num_clusters` when set.
    pub over_cluster: Option<usize>,
    pub self_labeling: bool,
    pub selflabel: SelfLabelConfig,
    pub kmeans: KMeansConfig,
    pub evaluate: EvaluateConfig,
    pub generalize: GeneralizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            name: "run".into(),
            run_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            preprocess: InpaintConfig::default(),
            encoder: EncoderConfig::default(),
            augmentation: AugmentationPolicy::standard(),
            neighbors: NeighborConfig::default(),
            cluster: ClusterHeadConfig::default(),
            over_cluster: None,
            self_labeling: true,
            selflabel: SelfLabelConfig::default(),
            kmeans: KMeansConfig::default(),
            evaluate: EvaluateConfig::default(),
            generalize: GeneralizeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings for the bundled synthetic benchmark (small encoder, five clusters).
    pub fn synthetic_benchmark(manifest: &Path, text_sidecar: &Path, seed: u64) -> Self {
        let mut cfg = RunConfig {
            name: format!("synthetic-{seed}"),
            data: DataConfig {
                manifest: manifest.to_path_buf(),
                text_sidecar: Some(text_sidecar.to_path_buf()),
                ..Default::default()
            },
            encoder: EncoderConfig {
                embedding_dim: 64,
                projection_dim: 32,
                epochs: 30,
                batch_size: 64,
                learning_rate: 5e-3,
                ..Default::default()
            },
            cluster: ClusterHeadConfig { num_clusters: 5, ..Default::default() },
            selflabel: SelfLabelConfig { learning_rate: 1e-5, ..Default::default() },
            ..Default::default()
        };
        cfg.set_seed(seed);
        cfg
    }

    /// Sets every stage seed to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.split_seed = seed;
        self.encoder.seed = seed;
        self.cluster.seed = seed;
        self.selflabel.seed = seed;
        self.kmeans.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(PipelineError::ConfigVersionMismatch { found: self.version, expected: CONFIG_VERSION });
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == ".." {
            return Err(PipelineError::InvalidConfig(format!("run name {:?} is not a plain directory name", self.name)));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(PipelineError::InvalidConfig("data.train_fraction must lie in (0, 1)".into()));
        }
        if self.neighbors.k == 0 {
            return Err(PipelineError::InvalidConfig("neighbors.k must be positive".into()));
        }
        self.encoder.validate()?;
        self.cluster_config().validate()?;
        self.selflabel.validate()?;
        Ok(())
    }

    /// Clustering settings with `over_cluster` applied.
    pub fn cluster_config(&self) -> ClusterHeadConfig {
        let mut c = self.cluster.clone();
        if let Some(n) = self.over_cluster {
            c.num_clusters = n;
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        let found = table.get("version").and_then(|v| v.as_integer()).unwrap_or(0);
        if found != CONFIG_VERSION as i64 {
            return Err(PipelineError::ConfigVersionMismatch {
                found: u32::try_from(found).unwrap_or(0),
                expected: CONFIG_VERSION,
            });
        }
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.run_root);
        fix(&mut cfg.data.manifest);
        for p in [&mut cfg.data.text_sidecar, &mut cfg.data.alias_table, &mut cfg.generalize.text_sidecar] {
            if let Some(p) = p {
                fix(p);
            }
        }
        Ok(cfg)
    }

    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.run_root.clone());
        root.join(&self.name)
    }

    fn final_stage(&self) -> Stage {
        if self.self_labeling {
            Stage::Selflabel
        } else {
            Stage::Cluster
        }
    }

    fn deps(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Preprocess => vec![],
            Stage::Pretrain => vec![Stage::Preprocess],
            Stage::Embed => vec![Stage::Preprocess, Stage::Pretrain],
            Stage::Mine => vec![Stage::Preprocess, Stage::Embed],
            Stage::Cluster => vec![Stage::Preprocess, Stage::Pretrain, Stage::Embed, Stage::Mine],
            Stage::Selflabel => vec![Stage::Preprocess, Stage::Pretrain, Stage::Cluster],
            Stage::Kmeans => match self.kmeans.source {
                KMeansSource::Pixels => vec![Stage::Preprocess],
                KMeansSource::Embeddings => vec![Stage::Preprocess, Stage::Embed],
            },
            Stage::Evaluate | Stage::Export => vec![Stage::Preprocess, self.final_stage()],
        }
    }

    /// The part of the config a stage's outputs depend on.
    fn stage_settings(&self, stage: Stage) -> Result<serde_json::Value> {
        Ok(match stage {
            Stage::Preprocess => serde_json::json!({
                "inpaint": self.preprocess,
                "train_fraction": self.data.train_fraction,
                "split_seed": self.data.split_seed,
                "inputs": self.input_digest()?,
            }),
            Stage::Pretrain => serde_json::json!({ "encoder": self.encoder, "augmentation": self.augmentation }),
            Stage::Embed => serde_json::json!({}),
            Stage::Mine => serde_json::json!({ "neighbors": self.neighbors }),
            Stage::Cluster => serde_json::json!({ "cluster": self.cluster_config() }),
            Stage::Selflabel => serde_json::json!({ "selflabel": self.selflabel }),
            Stage::Kmeans => serde_json::json!({
                "kmeans": self.kmeans,
                "clusters": self.kmeans_clusters(),
                "evaluate": self.evaluate,
                "input_size": self.encoder.input_size,
            }),
            Stage::Evaluate => serde_json::json!({ "evaluate": self.evaluate, "final": self.final_stage() }),
            Stage::Export => serde_json::json!({ "final": self.final_stage() }),
        })
    }

    fn kmeans_clusters(&self) -> usize {
        self.kmeans.num_clusters.unwrap_or(self.cluster_config().num_clusters)
    }

    /// Hash of the raw manifest, sidecar, alias table and every pixel file.
    fn input_digest(&self) -> Result<String> {
        let manifest = load_manifest(&self.data.manifest)?;
        let mut h = Sha256::new();
        h.update(fs::read(&self.data.manifest)?);
        for extra in [&self.data.text_sidecar, &self.data.alias_table].into_iter().flatten() {
            h.update(fs::read(extra)?);
        }
        for r in &manifest.records {
            h.update(r.image_id.as_bytes());
            h.update(Sha256::digest(fs::read(&r.pixel_path)?));
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    stage: Stage,
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

impl StageRecord {
    fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(&self.outputs).expect("outputs serialize")))
    }
}

fn hash_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                if rel != RECORD && !rel.ends_with(".tmp") {
                    out.insert(rel, hex::encode(Sha256::digest(fs::read(&path)?)));
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// What one call to [`run`] did.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub report: Option<EvaluationReport>,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    current: HashMap<Stage, Option<StageRecord>>,
}

impl<'a> Runner<'a> {
    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.as_str())
    }

    /// The stage's record, if present and its files are intact.
    fn intact_record(&self, stage: Stage) -> Result<Option<StageRecord>> {
        let path = self.stage_dir(stage).join(RECORD);
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(None);
        };
        let Ok(record) = serde_json::from_str::<StageRecord>(&text) else {
            log::warn!("{}: unreadable stage record", path.display());
            return Ok(None);
        };
        let actual = hash_dir(&self.stage_dir(stage))?;
        if actual != record.outputs {
            log::warn!("stage {stage}: artifacts changed since they were written");
            return Ok(None);
        }
        Ok(Some(record))
    }

    fn fingerprint(&mut self, stage: Stage) -> Result<Option<String>> {
        let mut h = Sha256::new();
        h.update(stage.as_str().as_bytes());
        h.update(serde_json::to_vec(&self.cfg.stage_settings(stage)?)?);
        for dep in self.cfg.deps(stage) {
            match self.current_record(dep)? {
                Some(r) => h.update(r.digest().as_bytes()),
                None => return Ok(None),
            }
        }
        Ok(Some(hex::encode(h.finalize())))
    }

    /// The stage's record if it is intact and up to date with the config and its inputs.
    fn current_record(&mut self, stage: Stage) -> Result<Option<StageRecord>> {
        if let Some(r) = self.current.get(&stage) {
            return Ok(r.clone());
        }
        let record = match self.intact_record(stage)? {
            Some(r) if self.fingerprint(stage)?.as_deref() == Some(r.fingerprint.as_str()) => Some(r),
            _ => None,
        };
        self.current.insert(stage, record.clone());
        Ok(record)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<bool> {
        for dep in self.cfg.deps(stage) {
            if self.current_record(dep)?.is_none() {
                return Err(PipelineError::MissingArtifact { stage, needs: dep, path: self.stage_dir(dep) });
            }
        }
        if self.current_record(stage)?.is_some() {
            log::info!("stage {stage}: up to date, skipping");
            return Ok(false);
        }
        let fingerprint = self.fingerprint(stage)?.expect("dependencies are current");
        let dir = self.stage_dir(stage);
        clear_stage_dir(&dir)?;
        log::info!("stage {stage}: running");
        self.execute(stage, &dir)?;
        let record = StageRecord { stage, fingerprint, outputs: hash_dir(&dir)? };
        write_atomic(&dir.join(RECORD), serde_json::to_string_pretty(&record)?.as_bytes())?;
        self.current.insert(stage, Some(record));
        Ok(true)
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        Ok(load_manifest(&self.stage_dir(Stage::Preprocess).join("manifest.jsonl"))?)
    }

    fn split(&self) -> Result<Split> {
        Ok(serde_json::from_str(&fs::read_to_string(self.stage_dir(Stage::Preprocess).join("split.json"))?)?)
    }

    fn eval_ids(&self, split: &Split, manifest: &DatasetManifest) -> BTreeSet<String> {
        match self.cfg.evaluate.split {
            EvalSplit::Test => split.test_ids.clone(),
            EvalSplit::Train => split.train_ids.clone(),
            EvalSplit::All => manifest.records.iter().map(|r| r.image_id.clone()).collect(),
        }
    }

    fn encoder_after_cluster(&self) -> Result<EncoderState> {
        let tuned = self.stage_dir(Stage::Cluster).join("encoder.blob");
        let path = if tuned.exists() { tuned } else { self.stage_dir(Stage::Pretrain).join("encoder.blob") };
        Ok(EncoderState::load(&path)?)
    }

    fn execute(&self, stage: Stage, dir: &Path) -> Result<()> {
        let cfg = self.cfg;
        match stage {
            Stage::Preprocess => {
                let raw = load_manifest(&cfg.data.manifest)?;
                let masks = match &cfg.data.text_sidecar {
                    Some(p) => load_text_sidecar(p, &raw)?,
                    None => Vec::new(),
                };
                let aliases = match &cfg.data.alias_table {
                    Some(p) => AliasTable::load(p)?,
                    None => AliasTable::default(),
                };
                let (clean, summary) = preprocess_corpus(&raw, &masks, &cfg.preprocess, &aliases, dir)?;
                let split = split_by_patient(&clean, cfg.data.train_fraction, cfg.data.split_seed)?;
                write_json(&dir.join("split.json"), &split)?;
                write_json(&dir.join("summary.json"), &summary)?;
            }
            Stage::Pretrain => {
                let manifest = self.manifest()?;
                let train = manifest.subset(&self.split()?.train_ids);
                let ckpt = dir.join(CHECKPOINT);
                let trainer = SslTrainer::new(&train, &cfg.encoder, &cfg.augmentation)?;
                let trainer = match trainer.with_checkpoint(&ckpt) {
                    Err(SslError::CheckpointMismatch) => {
                        log::warn!("discarding checkpoint from a different configuration");
                        fs::remove_file(&ckpt)?;
                        SslTrainer::new(&train, &cfg.encoder, &cfg.augmentation)?.with_checkpoint(&ckpt)?
                    }
                    other => other?,
                };
                let encoder = trainer.run()?;
                encoder.save(&dir.join("encoder.blob"))?;
                fs::remove_file(&ckpt).ok();
                write_json(&dir.join("log.json"), &encoder.training_log)?;
            }
            Stage::Embed => {
                let encoder = EncoderState::load(&self.stage_dir(Stage::Pretrain).join("encoder.blob"))?;
                embed(&encoder, &self.manifest()?)?.save(&dir.join("embeddings.json"))?;
            }
            Stage::Mine => {
                let manifest = self.manifest()?;
                let train_ids = self.split()?.train_ids;
                let emb = EmbeddingMatrix::load(&self.stage_dir(Stage::Embed).join("embeddings.json"))?.select(&train_ids);
                let index = mine_neighbors(&emb, cfg.neighbors.k)?;
                index.save(&dir.join("neighbors.json"))?;
                let agreement = neighbor_label_agreement(&index, &manifest).ok();
                write_json(&dir.join("summary.json"), &serde_json::json!({ "k": index.k, "label_agreement": agreement }))?;
            }
            Stage::Cluster => {
                let manifest = self.manifest()?;
                let train_ids = self.split()?.train_ids;
                let all = EmbeddingMatrix::load(&self.stage_dir(Stage::Embed).join("embeddings.json"))?;
                let index = NeighborIndex::load(&self.stage_dir(Stage::Mine).join("neighbors.json"))?;
                let head_cfg = cfg.cluster_config();
                let (training, assignment) = if head_cfg.finetune_encoder {
                    let encoder = EncoderState::load(&self.stage_dir(Stage::Pretrain).join("encoder.blob"))?;
                    let images = load_rasters(&manifest.subset(&train_ids), encoder.config.input_size)?;
                    let (tuned, training) = train_cluster_head_finetune(&encoder, &images, &index, &head_cfg)?;
                    tuned.save(&dir.join("encoder.blob"))?;
                    let assignment = assign(&training.head, &embed(&tuned, &manifest)?)?;
                    (training, assignment)
                } else {
                    let training = train_cluster_head(&all.select(&train_ids), &index, &head_cfg)?;
                    let assignment = assign(&training.head, &all)?;
                    (training, assignment)
                };
                training.head.save(&dir.join("head.blob"))?;
                assignment.save(&dir.join("assignment.json"))?;
                write_json(&dir.join("log.json"), &training.log)?;
            }
            Stage::Selflabel => {
                let manifest = self.manifest()?;
                let train_ids = self.split()?.train_ids;
                let encoder = self.encoder_after_cluster()?;
                let head = ClusterHead::load(&self.stage_dir(Stage::Cluster).join("head.blob"))?;
                let ids: Vec<String> = manifest.records.iter().map(|r| r.image_id.clone()).collect();
                let images = load_rasters(&manifest, encoder.config.input_size)?;
                let rows: Vec<usize> = (0..ids.len()).filter(|&i| train_ids.contains(&ids[i])).collect();
                let train_id_list: Vec<String> = rows.iter().map(|&i| ids[i].clone()).collect();
                let train_images: Vec<Raster> = rows.iter().map(|&i| images[i].clone()).collect();
                let outcome = self_label_train_rasters(&encoder, &head, &train_id_list, &train_images, &cfg.selflabel)?;
                let assignment = assign(&outcome.head, &embed_rasters(&outcome.encoder, ids, &images)?)?;
                outcome.encoder.save(&dir.join("encoder.blob"))?;
                outcome.head.save(&dir.join("head.blob"))?;
                assignment.save(&dir.join("assignment.json"))?;
                write_json(&dir.join("log.json"), &outcome.log)?;
            }
            Stage::Kmeans => {
                let manifest = self.manifest()?;
                let split = self.split()?;
                let features = match cfg.kmeans.source {
                    KMeansSource::Pixels => pixel_matrix(&manifest, cfg.encoder.input_size)?,
                    KMeansSource::Embeddings => {
                        EmbeddingMatrix::load(&self.stage_dir(Stage::Embed).join("embeddings.json"))?
                    }
                };
                let fit = kmeans(&features.select(&split.train_ids), self.cfg.kmeans_clusters(), cfg.kmeans.seed)?;
                let assignment = fit.predict(&features)?;
                assignment.save(&dir.join("assignment.json"))?;
                let keep = self.eval_ids(&split, &manifest);
                let report = evaluate(&assignment.select(&keep), &manifest, cfg.evaluate.split.as_str(), cfg.evaluate.merge)?;
                fs::write(dir.join("report.json"), report.to_json())?;
                fs::write(dir.join("report.txt"), report.to_table())?;
            }
            Stage::Evaluate => {
                let manifest = self.manifest()?;
                let split = self.split()?;
                let assignment = SoftAssignment::load(&self.stage_dir(cfg.final_stage()).join("assignment.json"))?;
                let keep = self.eval_ids(&split, &manifest);
                let report = evaluate(&assignment.select(&keep), &manifest, cfg.evaluate.split.as_str(), cfg.evaluate.merge)?;
                log::info!(
                    "evaluation on {}: CP {:.4} NMI {:.4}, {} of {} clusters filled",
                    report.split,
                    report.cp,
                    report.nmi,
                    report.filled_clusters,
                    report.num_clusters
                );
                fs::write(dir.join("report.json"), report.to_json())?;
                fs::write(dir.join("report.txt"), report.to_table())?;
            }
            Stage::Export => {
                let manifest = self.manifest()?;
                let assignment = SoftAssignment::load(&self.stage_dir(cfg.final_stage()).join("assignment.json"))?;
                export_cluster_manifest(&assignment, &manifest)?.save(&dir.join("cluster_manifest.json"))?;
            }
        }
        Ok(())
    }
}

fn clear_stage_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.file_name().is_some_and(|n| n == CHECKPOINT) {
                continue;
            }
            if path.is_dir() {
                fs::remove_dir_all(&path)?;
            } else {
                fs::remove_file(&path)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Flattened pixels of every image, resized to `size`×`size`.
pub fn pixel_matrix(manifest: &DatasetManifest, size: usize) -> Result<EmbeddingMatrix> {
    let images = load_rasters(manifest, size)?;
    let ids = manifest.records.iter().map(|r| r.image_id.clone()).collect();
    let vectors = Array2::from_shape_fn((images.len(), size * size), |(i, j)| images[i].data[j]);
    Ok(EmbeddingMatrix::new(ids, vectors, false)?)
}

/// Runs `stages` (in dependency order) and returns what was executed.
///
/// A requested stage whose inputs are missing or stale, and not requested
/// too, fails with [`PipelineError::MissingArtifact`].
pub fn run(cfg: &RunConfig, stages: &[Stage]) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let run_file = dir.join("run.json");
    if let Ok(text) = fs::read_to_string(&run_file) {
        let found = serde_json::from_str::<serde_json::Value>(&text)?
            .get("version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        if found != CONFIG_VERSION as u64 {
            return Err(PipelineError::ConfigVersionMismatch { found: found as u32, expected: CONFIG_VERSION });
        }
    }
    write_json(&run_file, &serde_json::json!({ "version": CONFIG_VERSION, "name": cfg.name }))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    let mut runner = Runner { cfg, dir: dir.clone(), current: HashMap::new() };
    let wanted: BTreeSet<Stage> = stages.iter().copied().collect();
    let (mut executed, mut skipped) = (Vec::new(), Vec::new());
    for stage in wanted {
        if runner.run_stage(stage)? {
            executed.push(stage);
        } else {
            skipped.push(stage);
        }
    }
    let report_path = dir.join(Stage::Evaluate.as_str()).join("report.json");
    let report = if stages.contains(&Stage::Evaluate) {
        Some(serde_json::from_str(&fs::read_to_string(report_path)?)?)
    } else {
        None
    };
    Ok(RunOutcome { run_dir: dir, executed, skipped, report })
}

/// Final encoder and head of a completed run.
fn final_checkpoints(cfg: &RunConfig) -> Result<(EncoderState, ClusterHead)> {
    let dir = cfg.run_dir();
    let (enc, head) = if cfg.self_labeling {
        let s = dir.join(Stage::Selflabel.as_str());
        (s.join("encoder.blob"), s.join("head.blob"))
    } else {
        let c = dir.join(Stage::Cluster.as_str());
        let tuned = c.join("encoder.blob");
        let enc = if tuned.exists() { tuned } else { dir.join(Stage::Pretrain.as_str()).join("encoder.blob") };
        (enc, c.join("head.blob"))
    };
    for p in [&enc, &head] {
        if !p.is_file() {
            return Err(PipelineError::MissingCheckpoint(p.clone()));
        }
    }
    Ok((EncoderState::load(&enc)?, ClusterHead::load(&head)?))
}

/// Clusters and scores an external corpus with the run's frozen weights.
///
/// Text is inpainted first when `generalize.text_sidecar` is set; images whose
/// view is listed in `generalize.exclude_labels` are left out.
pub fn generalization_eval(cfg: &RunConfig, external: &DatasetManifest) -> Result<EvaluationReport> {
    let (encoder, head) = final_checkpoints(cfg)?;
    let out = cfg.run_dir().join("generalize");
    fs::create_dir_all(&out)?;
    let manifest = match &cfg.generalize.text_sidecar {
        Some(sidecar) => {
            let masks: Vec<TextMask> = load_text_sidecar(sidecar, external)?;
            let aliases = match &cfg.data.alias_table {
                Some(p) => AliasTable::load(p)?,
                None => AliasTable::default(),
            };
            preprocess_corpus(external, &masks, &cfg.preprocess, &aliases, &out.join("clean"))?.0
        }
        None => external.clone(),
    };
    let excluded: BTreeSet<ViewLabel> = cfg.generalize.exclude_labels.iter().copied().collect();
    let keep: BTreeSet<String> = manifest
        .records
        .iter()
        .filter(|r| r.pseudo_label.is_none_or(|l| !excluded.contains(&l)))
        .map(|r| r.image_id.clone())
        .collect();
    let manifest = manifest.subset(&keep);
    let assignment = assign(&head, &embed(&encoder, &manifest)?)?;
    let report = evaluate(&assignment, &manifest, "external", cfg.evaluate.merge)?;
    log::info!(
        "external corpus: CP {:.4} NMI {:.4} over {} images ({} filled clusters)",
        report.cp,
        report.nmi,
        report.evaluated,
        filled_clusters(&assignment)
    );
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("report.txt"), report.to_table())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub image_id: String,
    pub cluster_id: usize,
    pub confidence: f64,
    pub pixel_path: PathBuf,
    /// Empty when the image has no pseudo-label.
    pub pseudo_label: String,
    pub patient_id: String,
    pub machine: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub cluster_id: usize,
    pub size: usize,
    pub mean_confidence: f64,
    pub min_confidence: f64,
}

/// Hard assignment of every image, ordered for review.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterManifest {
    pub num_clusters: usize,
    pub label_vocabulary: Vec<ViewLabel>,
    pub rows: Vec<ClusterRow>,
    pub clusters: Vec<ClusterStats>,
}

impl ClusterManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Rows sorted by cluster, then ascending confidence, then image id.
pub fn export_cluster_manifest(assignment: &SoftAssignment, manifest: &DatasetManifest) -> Result<ClusterManifest> {
    let index = manifest.id_index();
    let mut rows = Vec::with_capacity(assignment.len());
    for i in 0..assignment.len() {
        let id = &assignment.ids[i];
        let record = index.get(id.as_str()).map(|&r| &manifest.records[r]).ok_or_else(|| PipelineError::IdMismatch(id.clone()))?;
        rows.push(ClusterRow {
            image_id: id.clone(),
            cluster_id: assignment.hard_labels[i],
            confidence: assignment.confidence[i].clamp(0.0, 1.0),
            pixel_path: record.pixel_path.clone(),
            pseudo_label: record.pseudo_label.map(|l| l.as_str().to_string()).unwrap_or_default(),
            patient_id: record.patient_id.clone(),
            machine: record.machine.clone(),
            width: record.width,
            height: record.height,
        });
    }
    rows.sort_by(|a, b| {
        a.cluster_id
            .cmp(&b.cluster_id)
            .then(a.confidence.total_cmp(&b.confidence))
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    let c = assignment.num_clusters();
    let clusters = (0..c)
        .map(|k| {
            let conf: Vec<f64> = rows.iter().filter(|r| r.cluster_id == k).map(|r| r.confidence).collect();
            let size = conf.len();
            ClusterStats {
                cluster_id: k,
                size,
                mean_confidence: if size == 0 { 0.0 } else { conf.iter().sum::<f64>() / size as f64 },
                min_confidence: if size == 0 { 0.0 } else { conf.iter().copied().fold(f64::INFINITY, f64::min) },
            }
        })
        .collect();
    Ok(ClusterManifest { num_clusters: c, label_vocabulary: manifest.label_vocabulary.clone(), rows, clusters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageRecord;
    use ndarray::array;

    fn record(id: &str, label: Option<ViewLabel>) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            patient_id: "p".into(),
            pixel_path: PathBuf::from(format!("/img/{id}.png")),
            pseudo_label: label,
            machine: String::new(),
            width: 8,
            height: 8,
        }
    }

    #[test]
    fn export_orders_by_cluster_then_confidence() {
        let m = DatasetManifest::new(vec![
            record("a", Some(ViewLabel::Brain)),
            record("b", None),
            record("c", Some(ViewLabel::Femur)),
            record("d", Some(ViewLabel::Femur)),
        ]);
        let probs = array![[0.1, 0.0, 0.9], [0.0, 0.3, 0.7], [0.0, 0.0, 1.0], [0.6, 0.4, 0.0]];
        let a = SoftAssignment::from_probs(vec!["a".into(), "b".into(), "c".into(), "d".into()], probs).unwrap();
        let cm = export_cluster_manifest(&a, &m).unwrap();
        let order: Vec<&str> = cm.rows.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(order, ["d", "b", "a", "c"]);
        assert_eq!(cm.rows[1].pseudo_label, "");
        assert_eq!(cm.clusters[1].size, 0);
        assert_eq!(cm.clusters[1].min_confidence, 0.0);
        assert!((cm.clusters[2].min_confidence - 0.7).abs() < 1e-12);
        assert!((cm.clusters[2].mean_confidence - 2.6 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn export_three_confidences() {
        let m = DatasetManifest::new(vec![record("x", None), record("y", None), record("z", None)]);
        let probs = array![[0.3, 0.3, 0.4], [0.005, 0.005, 0.99], [0.15, 0.15, 0.7]];
        let a = SoftAssignment::from_probs(vec!["x".into(), "y".into(), "z".into()], probs).unwrap();
        let conf: Vec<f64> = export_cluster_manifest(&a, &m).unwrap().rows.iter().map(|r| r.confidence).collect();
        assert!((conf[0] - 0.4).abs() < 1e-12 && (conf[1] - 0.7).abs() < 1e-12 && (conf[2] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn export_rejects_unknown_ids() {
        let m = DatasetManifest::new(vec![record("a", None)]);
        let a = SoftAssignment::one_hot(vec!["zz".into()], &[0], 2).unwrap();
        assert!(matches!(export_cluster_manifest(&a, &m), Err(PipelineError::IdMismatch(id)) if id == "zz"));
    }

    #[test]
    fn config_round_trips_and_checks_version() {
        let cfg = RunConfig::synthetic_benchmark(Path::new("m.jsonl"), Path::new("t.jsonl"), 3);
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let bumped = text.replace("version = 1", "version = 2");
        assert!(matches!(
            RunConfig::from_toml(&bumped),
            Err(PipelineError::ConfigVersionMismatch { found: 2, expected: 1 })
        ));
        assert!(matches!(RunConfig::from_toml("name = \"x\""), Err(PipelineError::ConfigVersionMismatch { found: 0, .. })));
        assert!(RunConfig::from_toml("version = 1\nbogus = 3").is_err());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml("version = 1\n[cluster]\nlambda = 0.0\n").unwrap();
        assert_eq!(cfg.cluster.lambda, 0.0);
        assert_eq!(cfg.cluster.num_clusters, 15);
        assert_eq!(cfg.neighbors.k, 20);
        assert_eq!(cfg.evaluate.split, EvalSplit::Test);
    }

    #[test]
    fn over_cluster_replaces_cluster_count() {
        let cfg = RunConfig { over_cluster: Some(40), ..Default::default() };
        assert_eq!(cfg.cluster_config().num_clusters, 40);
        assert_eq!(cfg.kmeans_clusters(), 40);
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }
}
