//! Procedural benchmark corpus.
//!
//! Each view is a distinct anatomical-looking shape drawn inside an
//! ultrasound-like sector at a random pose, with multiplicative speckle.
//! Images carry burned-in annotation text (a view alias at top left, the
//! scanner model at bottom right) whose boxes are listed in a sidecar, so the
//! corpus exercises the whole preprocessing path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{save_manifest, DataError, DatasetManifest, ImageRecord, ViewLabel};
use crate::derive_seed;
use crate::preprocess::sanitize_file_stem;
use crate::raster::{save_gray, Raster};
use crate::ssl::augment::gaussian_blur;

pub const BENCHMARK_VIEWS: [ViewLabel; 5] = [
    ViewLabel::Brain,
    ViewLabel::Abdomen,
    ViewLabel::Femur,
    ViewLabel::FourChamber,
    ViewLabel::Spine,
];

/// Relative class frequencies, in the order of [`BENCHMARK_VIEWS`].
pub const BENCHMARK_WEIGHTS: [usize; 5] = [5, 4, 3, 2, 1];

const MACHINES: [&str; 3] = ["GE E8", "GE E10", "Voluson S"];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub images: usize,
    pub image_size: usize,
    pub images_per_patient: usize,
    /// Share of images drawn without any view text.
    pub unlabeled_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { images: 2500, image_size: 64, images_per_patient: 5, unlabeled_fraction: 0.04, seed: 0 }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.images == 0 || self.images_per_patient == 0 {
            return Err(SynthError::InvalidConfig("images and images_per_patient must be positive".into()));
        }
        if self.image_size < 48 {
            return Err(SynthError::InvalidConfig(format!("image_size {} below 48", self.image_size)));
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return Err(SynthError::InvalidConfig("unlabeled_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub sidecar_path: PathBuf,
    /// Generating view of every image, including those drawn without view text.
    pub truth: BTreeMap<String, ViewLabel>,
}

/// Splits `n` by [`BENCHMARK_WEIGHTS`] with largest-remainder rounding.
pub fn class_counts(n: usize) -> [usize; 5] {
    let total: usize = BENCHMARK_WEIGHTS.iter().sum();
    let mut counts = BENCHMARK_WEIGHTS.map(|w| w * n / total);
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(BENCHMARK_WEIGHTS[i] * n % total), i));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn view_text(view: ViewLabel, pick: usize) -> &'static str {
    let options: &[&str] = match view {
        ViewLabel::Brain => &["BRAIN", "HEAD"],
        ViewLabel::Abdomen => &["ABDO", "AC"],
        ViewLabel::Femur => &["FL", "FEMUR"],
        ViewLabel::FourChamber => &["4CH"],
        ViewLabel::Spine => &["SPINE"],
        _ => &[""],
    };
    options[pick % options.len()]
}

struct Pose {
    cx: f32,
    cy: f32,
    scale: f32,
    cos: f32,
    sin: f32,
    gain: f32,
}

fn disk(u: f32, v: f32, cu: f32, cv: f32, r: f32) -> bool {
    (u - cu) * (u - cu) + (v - cv) * (v - cv) < r * r
}

/// Intensity of the view's structure at local coordinates (unit = image size).
fn structure(view: ViewLabel, u: f32, v: f32) -> f32 {
    match view {
        ViewLabel::Brain => {
            let r = ((u / 0.30).powi(2) + (v / 0.23).powi(2)).sqrt();
            if (r - 1.0).abs() < 0.13 {
                1.0
            } else if v.abs() < 0.025 && r < 0.85 {
                0.5
            } else {
                0.0
            }
        }
        ViewLabel::Abdomen => {
            let r = (u * u + v * v).sqrt() / 0.26;
            if disk(u, v, 0.06, -0.04, 0.1) {
                0.0
            } else if disk(u, v, -0.12, 0.12, 0.06) {
                1.0
            } else if r < 1.0 {
                0.55
            } else {
                0.0
            }
        }
        ViewLabel::Femur => {
            if (v.abs() < 0.05 && u.abs() < 0.3) || disk(u, v, -0.3, 0.0, 0.07) || disk(u, v, 0.3, 0.0, 0.07) {
                1.0
            } else {
                0.0
            }
        }
        ViewLabel::FourChamber => {
            let r = (u * u + v * v).sqrt() / 0.25;
            if r < 1.0 && (u.abs() < 0.045 || v.abs() < 0.045) {
                1.0
            } else if (r - 1.0).abs() < 0.16 {
                0.9
            } else {
                0.0
            }
        }
        ViewLabel::Spine => {
            let k = ((u + 0.35) / 0.1).round();
            if (0.0..=7.0).contains(&k) {
                let cu = -0.35 + 0.1 * k;
                if disk(u, v, cu, -0.065, 0.038) || disk(u, v, cu, 0.065, 0.038) {
                    return 1.0;
                }
            }
            0.0
        }
        _ => 0.0,
    }
}

/// Renders one image of `view`; text is not drawn here.
pub fn render_view<R: Rng>(view: ViewLabel, size: usize, rng: &mut R) -> Raster {
    let s = size as f32;
    let angle = rng.random_range(-0.4f32..0.4);
    let pose = Pose {
        cx: rng.random_range(0.38..0.62),
        cy: rng.random_range(0.43..0.67),
        scale: rng.random_range(0.8..1.2),
        cos: angle.cos(),
        sin: angle.sin(),
        gain: rng.random_range(0.4..0.95),
    };
    let tissue = rng.random_range(0.08..0.3);
    let half_angle = 0.75f32;
    let noise = Normal::new(0.0f32, 0.3).expect("valid sigma");
    let mut data = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let px = (x as f32 + 0.5) / s;
            let py = (y as f32 + 0.5) / s;
            let (dx, dy) = (px - 0.5, py - 0.02);
            let radius = (dx * dx + dy * dy).sqrt();
            if !(0.1..0.98).contains(&radius) || dx.atan2(dy).abs() > half_angle {
                continue;
            }
            let (lx, ly) = ((px - pose.cx) / pose.scale, (py - pose.cy) / pose.scale);
            let u = pose.cos * lx + pose.sin * ly;
            let v = -pose.sin * lx + pose.cos * ly;
            let base = tissue + pose.gain * structure(view, u, v);
            let speckle = (1.0 + noise.sample(rng)).max(0.0);
            data[y * size + x] = (base * speckle).clamp(0.0, 1.0);
        }
    }
    gaussian_blur(&Raster::new(size, size, data), 0.6)
}

/// 3×5 bitmap of a character, one row per `u8` (low 3 bits).
fn glyph(ch: char) -> [u8; 5] {
    let h = derive_seed(&[ch as u64, 0x91f]);
    let mut rows = [0u8; 5];
    for (i, row) in rows.iter_mut().enumerate() {
        *row = ((h >> (3 * i)) & 0b111) as u8 | 0b010;
    }
    rows
}

/// Draws `text` with its box at `(x, y)` and returns the box extent.
fn burn_text(img: &mut Raster, text: &str, x: usize, y: usize) -> (usize, usize) {
    let w = 4 * text.chars().count() + 1;
    let h = 7;
    for (k, ch) in text.chars().enumerate() {
        if ch == ' ' {
            continue;
        }
        for (r, bits) in glyph(ch).iter().enumerate() {
            for c in 0..3 {
                if bits >> (2 - c) & 1 == 1 {
                    img.set(x + 1 + 4 * k + c, y + 1 + r, 0.95);
                }
            }
        }
    }
    (w, h)
}

#[derive(Serialize)]
struct SidecarLine<'a> {
    image_id: &'a str,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    raw_text: &'a str,
}

/// Writes `images/`, `manifest.jsonl` and `text_boxes.jsonl` under `out_dir`.
///
/// The manifest carries no labels: view names are recoverable only from the
/// burned-in text listed in the sidecar.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let counts = class_counts(cfg.images);
    let mut views: Vec<ViewLabel> =
        BENCHMARK_VIEWS.iter().zip(counts).flat_map(|(&v, n)| std::iter::repeat_n(v, n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5a7d]));
    views.shuffle(&mut rng);
    let size = cfg.image_size;
    let rendered: Vec<Result<(ImageRecord, Vec<(usize, usize, usize, usize, String)>), SynthError>> = views
        .par_iter()
        .enumerate()
        .map(|(i, &view)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, i as u64, 0x1a6e]));
            let image_id = format!("syn{}-{i:05}", cfg.seed);
            let mut img = render_view(view, size, &mut rng);
            let mut boxes = Vec::new();
            if rng.random::<f64>() >= cfg.unlabeled_fraction {
                let text = view_text(view, rng.random_range(0..4));
                let (w, h) = burn_text(&mut img, text, 1, 1);
                boxes.push((1, 1, w, h, text.to_string()));
            }
            let machine = MACHINES[(i / cfg.images_per_patient) % MACHINES.len()];
            let mx = size - (4 * machine.len() + 1) - 1;
            let my = size - 8;
            let (w, h) = burn_text(&mut img, machine, mx, my);
            boxes.push((mx, my, w, h, machine.to_string()));
            let pixel_path = image_dir.join(format!("{}.png", sanitize_file_stem(&image_id)));
            save_gray(&img.to_gray(), &pixel_path)?;
            let record = ImageRecord {
                image_id,
                patient_id: format!("pat{}-{:04}", cfg.seed, i / cfg.images_per_patient),
                pixel_path,
                pseudo_label: None,
                machine: machine.to_string(),
                width: size as u32,
                height: size as u32,
            };
            Ok((record, boxes))
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.images);
    let mut sidecar = String::new();
    let mut truth = BTreeMap::new();
    for (item, &view) in rendered.into_iter().zip(&views) {
        let (record, boxes) = item?;
        for (x, y, w, h, text) in &boxes {
            let line = SidecarLine { image_id: &record.image_id, x: *x, y: *y, w: *w, h: *h, raw_text: text };
            sidecar.push_str(&serde_json::to_string(&line)?);
            sidecar.push('\n');
        }
        truth.insert(record.image_id.clone(), view);
        records.push(record);
    }
    let mut manifest = DatasetManifest::new(records);
    manifest.label_vocabulary = BENCHMARK_VIEWS.to_vec();
    manifest.provenance.insert("generator".into(), "fusc-synth".into());
    manifest.provenance.insert("seed".into(), cfg.seed.to_string());
    let manifest_path = out_dir.join("manifest.jsonl");
    save_manifest(&manifest, &manifest_path)?;
    let sidecar_path = out_dir.join("text_boxes.jsonl");
    fs::write(&sidecar_path, sidecar)?;
    Ok(SynthCorpus { manifest, manifest_path, sidecar_path, truth })
}
