//! Burned-in text removal and OCR label canonicalization.
//!
//! The OCR engine runs elsewhere; its output arrives as a JSON Lines sidecar,
//! one row per detected text box:
//!
//! ```text
//! {"image_id":"img1","x":10,"y":10,"w":50,"h":12,"raw_text":"FEMUR"}
//! ```
//!
//! Boxes are erased by neighbour-mean diffusion and the text of each box is
//! mapped to a canonical view through an alias table. Rows whose text maps to
//! no view are written to a rejects report, never guessed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{save_manifest, DataError, DatasetManifest, ViewLabel};
use crate::raster::{load_gray, save_gray};

const DEFAULT_ALIASES: &str = include_str!("../data/view_aliases.tsv");

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("sidecar line {line}: unknown image `{image_id}`")]
    UnknownImage { image_id: String, line: usize },
    #[error("sidecar line {line}: box ({x},{y},{w},{h}) outside {width}x{height} image `{image_id}`")]
    OutOfBoundsBox {
        image_id: String,
        line: usize,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("sidecar line {line}: {reason}")]
    MalformedSidecar { line: usize, reason: String },
    #[error("no alias matches `{0}`")]
    UnrecognizedLabel(String),
    #[error("alias table line {line}: {reason}")]
    MalformedAliasTable { line: usize, reason: String },
    #[error("inpainting `{image_id}` stopped after {iterations} iterations with residual {residual:.4}")]
    NonConvergence {
        image_id: String,
        iterations: usize,
        residual: f64,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned pixel rectangle with the OCR text read inside it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    #[serde(default)]
    pub raw_text: String,
}

impl TextBox {
    pub fn rect(x: u32, y: u32, w: u32, h: u32) -> Self {
        TextBox { x, y, w, h, raw_text: String::new() }
    }

    fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x.checked_add(self.w).is_some_and(|r| r <= width)
            && self.y.checked_add(self.h).is_some_and(|b| b <= height)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextMask {
    pub image_id: String,
    pub boxes: Vec<TextBox>,
}

impl TextMask {
    pub fn empty(image_id: impl Into<String>) -> Self {
        TextMask { image_id: image_id.into(), boxes: Vec::new() }
    }
}

#[derive(Deserialize)]
struct SidecarRow {
    image_id: String,
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    #[serde(default)]
    raw_text: String,
}

/// Parses sidecar text, validating each box against the manifest's image sizes.
/// Masks come back one per image, in order of first appearance.
pub fn parse_text_sidecar(
    text: &str,
    manifest: &DatasetManifest,
) -> Result<Vec<TextMask>, PreprocessError> {
    let index = manifest.id_index();
    let mut masks: Vec<TextMask> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: SidecarRow =
            serde_json::from_str(raw).map_err(|e| PreprocessError::MalformedSidecar {
                line,
                reason: e.to_string(),
            })?;
        let record = index
            .get(row.image_id.as_str())
            .map(|&i| &manifest.records[i])
            .ok_or_else(|| PreprocessError::UnknownImage {
                image_id: row.image_id.clone(),
                line,
            })?;
        let tb = TextBox { x: row.x, y: row.y, w: row.w, h: row.h, raw_text: row.raw_text };
        if !tb.fits(record.width, record.height) {
            return Err(PreprocessError::OutOfBoundsBox {
                image_id: row.image_id,
                line,
                x: tb.x,
                y: tb.y,
                w: tb.w,
                h: tb.h,
                width: record.width,
                height: record.height,
            });
        }
        let at = *slot.entry(row.image_id.clone()).or_insert_with(|| {
            masks.push(TextMask::empty(row.image_id.clone()));
            masks.len() - 1
        });
        masks[at].boxes.push(tb);
    }
    Ok(masks)
}

pub fn load_text_sidecar(
    path: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<TextMask>, PreprocessError> {
    parse_text_sidecar(&fs::read_to_string(path)?, manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    pub max_iterations: usize,
    /// Largest per-pixel change, in 8-bit intensity units, accepted as converged.
    pub convergence_tol: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig { max_iterations: 2000, convergence_tol: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inpainted {
    pub image: GrayImage,
    pub iterations: usize,
    /// Largest per-pixel change in the final sweep.
    pub residual: f64,
    pub converged: bool,
}

impl Inpainted {
    /// Turns an unconverged result into [`PreprocessError::NonConvergence`].
    pub fn check(self, image_id: &str) -> Result<GrayImage, PreprocessError> {
        if self.converged {
            Ok(self.image)
        } else {
            Err(PreprocessError::NonConvergence {
                image_id: image_id.to_string(),
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

/// Fills the masked pixels by Jacobi neighbour-mean diffusion.
///
/// Masked pixels start at the mean of the mask's boundary ring (unmasked pixels
/// 4-adjacent to the mask) and are repeatedly replaced by the mean of their
/// in-image 4-neighbours until no pixel moves by `convergence_tol` or more.
/// Unmasked pixels are copied through untouched. An image with no unmasked
/// boundary (fully masked) is returned unchanged.
pub fn inpaint_text(image: &GrayImage, mask: &TextMask, cfg: &InpaintConfig) -> Inpainted {
    let width = image.width() as usize;
    let height = image.height() as usize;
    let src = image.as_raw();
    let mut masked = vec![false; width * height];
    for b in &mask.boxes {
        let x_end = ((b.x + b.w) as usize).min(width);
        let y_end = ((b.y + b.h) as usize).min(height);
        for y in b.y as usize..y_end {
            for x in b.x as usize..x_end {
                masked[y * width + x] = true;
            }
        }
    }
    let holes: Vec<usize> = (0..width * height).filter(|&i| masked[i]).collect();
    let unchanged = |converged| Inpainted {
        image: image.clone(),
        iterations: 0,
        residual: 0.0,
        converged,
    };
    if holes.is_empty() {
        return unchanged(true);
    }

    let neighbours = |i: usize| {
        let (x, y) = (i % width, i / width);
        let mut out = [usize::MAX; 4];
        if x > 0 {
            out[0] = i - 1;
        }
        if x + 1 < width {
            out[1] = i + 1;
        }
        if y > 0 {
            out[2] = i - width;
        }
        if y + 1 < height {
            out[3] = i + width;
        }
        out
    };

    let mut ring_sum = 0.0f64;
    let mut ring_len = 0usize;
    let mut on_ring = vec![false; width * height];
    for &i in &holes {
        for n in neighbours(i) {
            if n != usize::MAX && !masked[n] && !on_ring[n] {
                on_ring[n] = true;
                ring_sum += src[n] as f64;
                ring_len += 1;
            }
        }
    }
    if ring_len == 0 {
        return unchanged(true);
    }

    let mut values: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    let start = ring_sum / ring_len as f64;
    for &i in &holes {
        values[i] = start;
    }
    let stencil: Vec<[usize; 4]> = holes.iter().map(|&i| neighbours(i)).collect();
    let mut next = vec![0.0f64; holes.len()];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < cfg.max_iterations.max(1) {
        for (slot, st) in next.iter_mut().zip(&stencil) {
            let (mut sum, mut count) = (0.0, 0.0);
            for &n in st {
                if n != usize::MAX {
                    sum += values[n];
                    count += 1.0;
                }
            }
            *slot = sum / count;
        }
        residual = 0.0;
        for (&i, &v) in holes.iter().zip(&next) {
            residual = f64::max(residual, (v - values[i]).abs());
            values[i] = v;
        }
        iterations += 1;
        if residual < cfg.convergence_tol {
            break;
        }
    }

    let mut out = image.clone();
    let buf: &mut [u8] = &mut out;
    for &i in &holes {
        buf[i] = values[i].round().clamp(0.0, 255.0) as u8;
    }
    Inpainted {
        image: out,
        iterations,
        residual,
        converged: residual < cfg.convergence_tol,
    }
}

/// Case- and punctuation-insensitive lookup key.
pub fn normalize_label_text(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Alias → canonical view lookup, loaded from a two-column TSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AliasTable {
    entries: BTreeMap<String, ViewLabel>,
}

impl AliasTable {
    pub fn from_tsv(text: &str) -> Result<Self, PreprocessError> {
        let mut entries = BTreeMap::new();
        // canonical names always resolve to themselves
        for v in ViewLabel::ALL {
            entries.insert(normalize_label_text(v.as_str()), v);
        }
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut cols = trimmed.split('\t');
            let (Some(alias), Some(view), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(PreprocessError::MalformedAliasTable {
                    line: line_no,
                    reason: "expected `alias<TAB>view`".into(),
                });
            };
            let view: ViewLabel =
                view.trim().parse().map_err(|e: crate::data::NotAView| {
                    PreprocessError::MalformedAliasTable { line: line_no, reason: e.to_string() }
                })?;
            let key = normalize_label_text(alias);
            if key.is_empty() {
                return Err(PreprocessError::MalformedAliasTable {
                    line: line_no,
                    reason: "empty alias".into(),
                });
            }
            if let Some(prev) = entries.insert(key.clone(), view) {
                if prev != view {
                    return Err(PreprocessError::MalformedAliasTable {
                        line: line_no,
                        reason: format!("alias `{key}` maps to both {prev} and {view}"),
                    });
                }
            }
        }
        Ok(AliasTable { entries })
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        AliasTable::from_tsv(&fs::read_to_string(path)?)
    }

    pub fn parse(&self, raw_text: &str) -> Result<ViewLabel, PreprocessError> {
        self.entries
            .get(&normalize_label_text(raw_text))
            .copied()
            .ok_or_else(|| PreprocessError::UnrecognizedLabel(raw_text.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for AliasTable {
    fn default() -> Self {
        AliasTable::from_tsv(DEFAULT_ALIASES).expect("bundled alias table is valid")
    }
}

fn default_aliases() -> &'static AliasTable {
    static TABLE: OnceLock<AliasTable> = OnceLock::new();
    TABLE.get_or_init(AliasTable::default)
}

/// Maps OCR text to a view using the bundled alias table.
pub fn parse_pseudo_label(raw_text: &str) -> Result<ViewLabel, PreprocessError> {
    default_aliases().parse(raw_text)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectRow {
    pub image_id: String,
    pub raw_text: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub images: usize,
    pub inpainted: usize,
    pub labeled_from_sidecar: usize,
    pub rejects: usize,
    /// Images whose inpainting hit `max_iterations` (output still written).
    pub non_converged: Vec<String>,
}

fn resolve_label(
    image_id: &str,
    mask: Option<&TextMask>,
    aliases: &AliasTable,
    rejects: &mut Vec<RejectRow>,
) -> Option<ViewLabel> {
    let mask = mask?;
    let mut found: Vec<(ViewLabel, &str)> = Vec::new();
    for b in &mask.boxes {
        if b.raw_text.trim().is_empty() {
            continue;
        }
        match aliases.parse(&b.raw_text) {
            Ok(label) => found.push((label, &b.raw_text)),
            Err(_) => rejects.push(RejectRow {
                image_id: image_id.to_string(),
                raw_text: b.raw_text.clone(),
                reason: "unrecognized label".into(),
            }),
        }
    }
    let first = found.first()?.0;
    if found.iter().all(|(l, _)| *l == first) {
        Some(first)
    } else {
        for (label, text) in &found {
            rejects.push(RejectRow {
                image_id: image_id.to_string(),
                raw_text: text.to_string(),
                reason: format!("conflicting labels (read as {label})"),
            });
        }
        None
    }
}

/// Inpaints every image in `manifest`, relabels from the sidecar text and
/// writes `images/`, `manifest.jsonl` and `rejects.jsonl` under `out_dir`.
///
/// A record whose sidecar text yields one unambiguous view takes that view as
/// its pseudo-label; otherwise the manifest label is kept.
pub fn preprocess_corpus(
    manifest: &DatasetManifest,
    masks: &[TextMask],
    cfg: &InpaintConfig,
    aliases: &AliasTable,
    out_dir: &Path,
) -> Result<(DatasetManifest, PreprocessSummary), PreprocessError> {
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let by_id: HashMap<&str, &TextMask> = masks.iter().map(|m| (m.image_id.as_str(), m)).collect();

    struct Outcome {
        path: PathBuf,
        label: Option<ViewLabel>,
        from_sidecar: bool,
        rejects: Vec<RejectRow>,
        inpainted: bool,
        converged: bool,
    }

    let outcomes: Vec<Outcome> = manifest
        .records
        .par_iter()
        .map(|r| -> Result<Outcome, PreprocessError> {
            let mask = by_id.get(r.image_id.as_str()).copied();
            let img = load_gray(&r.pixel_path)?;
            let (out, converged) = match mask {
                Some(m) if !m.boxes.is_empty() => {
                    let res = inpaint_text(&img, m, cfg);
                    (res.image, res.converged)
                }
                _ => (img, true),
            };
            let path = image_dir.join(format!("{}.png", sanitize_file_stem(&r.image_id)));
            save_gray(&out, &path)?;
            let mut rejects = Vec::new();
            let sidecar_label = resolve_label(&r.image_id, mask, aliases, &mut rejects);
            Ok(Outcome {
                path,
                label: sidecar_label.or(r.pseudo_label),
                from_sidecar: sidecar_label.is_some(),
                rejects,
                inpainted: mask.is_some_and(|m| !m.boxes.is_empty()),
                converged,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut result = manifest.clone();
    let mut summary = PreprocessSummary { images: manifest.len(), ..Default::default() };
    let mut rejects_out = String::new();
    for (record, o) in result.records.iter_mut().zip(outcomes) {
        record.pixel_path = o.path;
        record.pseudo_label = o.label.filter(|l| manifest.label_vocabulary.contains(l));
        summary.inpainted += o.inpainted as usize;
        summary.labeled_from_sidecar += o.from_sidecar as usize;
        if !o.converged {
            summary.non_converged.push(record.image_id.clone());
        }
        for row in o.rejects {
            rejects_out.push_str(&serde_json::to_string(&row).expect("reject row serializes"));
            rejects_out.push('\n');
            summary.rejects += 1;
        }
    }
    result
        .provenance
        .insert("preprocess".into(), format!("inpaint tol={} max_iter={}", cfg.convergence_tol, cfg.max_iterations));
    save_manifest(&result, &out_dir.join("manifest.jsonl"))?;
    let mut f = fs::File::create(out_dir.join("rejects.jsonl"))?;
    f.write_all(rejects_out.as_bytes())?;
    Ok((result, summary))
}

/// Keeps ids usable as file names.
pub fn sanitize_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageRecord;
    use image::Luma;
    use proptest::prelude::*;

    fn manifest_256() -> DatasetManifest {
        DatasetManifest::new(vec![ImageRecord {
            image_id: "img1".into(),
            patient_id: "p1".into(),
            pixel_path: PathBuf::from("img1.png"),
            pseudo_label: None,
            machine: "E8".into(),
            width: 256,
            height: 256,
        }])
    }

    #[test]
    fn sidecar_single_box() {
        let m = manifest_256();
        let masks = parse_text_sidecar(
            r#"{"image_id":"img1","x":10,"y":10,"w":50,"h":12,"raw_text":"FEMUR"}"#,
            &m,
        )
        .unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].boxes[0], TextBox { x: 10, y: 10, w: 50, h: 12, raw_text: "FEMUR".into() });
    }

    #[test]
    fn sidecar_out_of_bounds_and_unknown() {
        let m = manifest_256();
        assert!(matches!(
            parse_text_sidecar(r#"{"image_id":"img1","x":250,"y":250,"w":20,"h":20}"#, &m),
            Err(PreprocessError::OutOfBoundsBox { .. })
        ));
        assert!(matches!(
            parse_text_sidecar(r#"{"image_id":"nope","x":0,"y":0,"w":2,"h":2}"#, &m),
            Err(PreprocessError::UnknownImage { .. })
        ));
        assert!(parse_text_sidecar("", &m).unwrap().is_empty());
    }

    #[test]
    fn empty_mask_is_identity() {
        let img = GrayImage::from_fn(16, 16, |x, y| Luma([(x * 13 + y * 3) as u8]));
        let out = inpaint_text(&img, &TextMask::empty("a"), &InpaintConfig::default());
        assert_eq!(out.image, img);
        assert!(out.converged);
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = GrayImage::from_pixel(20, 20, Luma([128]));
        let mask = TextMask { image_id: "a".into(), boxes: vec![TextBox::rect(3, 4, 9, 6)] };
        let out = inpaint_text(&img, &mask, &InpaintConfig::default());
        assert_eq!(out.image, img);
    }

    #[test]
    fn single_pixel_takes_neighbour_mean() {
        let mut img = GrayImage::from_pixel(5, 5, Luma([100]));
        img.put_pixel(2, 2, Luma([255]));
        img.put_pixel(0, 0, Luma([7]));
        let mask = TextMask { image_id: "a".into(), boxes: vec![TextBox::rect(2, 2, 1, 1)] };
        let out = inpaint_text(&img, &mask, &InpaintConfig::default());
        assert_eq!(out.image.get_pixel(2, 2).0[0], 100);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.image.get_pixel(0, 0).0[0], 7);
    }

    #[test]
    fn unconverged_result_is_flagged() {
        let img = GrayImage::from_fn(40, 40, |x, _| Luma([(x * 6) as u8]));
        let mask = TextMask { image_id: "a".into(), boxes: vec![TextBox::rect(5, 5, 30, 30)] };
        let cfg = InpaintConfig { max_iterations: 2, convergence_tol: 1e-6 };
        let out = inpaint_text(&img, &mask, &cfg);
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
        assert!(matches!(out.check("a"), Err(PreprocessError::NonConvergence { iterations: 2, .. })));
    }

    #[test]
    fn label_aliases() {
        assert_eq!(parse_pseudo_label("4CH").unwrap(), ViewLabel::FourChamber);
        assert_eq!(parse_pseudo_label("lips/nose").unwrap(), ViewLabel::LipsNose);
        assert_eq!(parse_pseudo_label("3VV").unwrap(), ViewLabel::ThreeVesselView);
        assert_eq!(parse_pseudo_label("3vt").unwrap(), ViewLabel::ThreeVesselView);
        assert_eq!(parse_pseudo_label("3VV/3VT").unwrap(), ViewLabel::ThreeVesselView);
        assert!(matches!(parse_pseudo_label("XYZ"), Err(PreprocessError::UnrecognizedLabel(_))));
        assert!(parse_pseudo_label("").is_err());
    }

    #[test]
    fn canonical_names_are_fixed_points() {
        for v in ViewLabel::ALL {
            assert_eq!(parse_pseudo_label(v.as_str()).unwrap(), v);
            assert_eq!(parse_pseudo_label(v.display_name()).unwrap(), v);
        }
    }

    #[test]
    fn alias_table_rejects_conflicts() {
        assert!(AliasTable::from_tsv("x\tBrain\nx\tFemur\n").is_err());
        assert!(AliasTable::from_tsv("x\tPlacenta\n").is_err());
        let t = AliasTable::from_tsv("tt\tFemur\n").unwrap();
        assert_eq!(t.parse("T.T").unwrap(), ViewLabel::Femur);
    }

    fn image_and_mask() -> impl Strategy<Value = (GrayImage, TextMask)> {
        (4u32..40, 4u32..40).prop_flat_map(|(w, h)| {
            let pixels = prop::collection::vec(any::<u8>(), (w * h) as usize);
            let boxes = prop::collection::vec(
                (0..w, 0..h, 1u32..12, 1u32..12).prop_map(move |(x, y, bw, bh)| {
                    TextBox::rect(x, y, bw.min(w - x), bh.min(h - y))
                }),
                0..4,
            );
            (pixels, boxes).prop_map(move |(px, boxes)| {
                (
                    GrayImage::from_raw(w, h, px).unwrap(),
                    TextMask { image_id: "r".into(), boxes },
                )
            })
        })
    }

    fn mask_bitmap(img: &GrayImage, mask: &TextMask) -> Vec<bool> {
        let w = img.width();
        let mut bits = vec![false; (w * img.height()) as usize];
        for b in &mask.boxes {
            for y in b.y..b.y + b.h {
                for x in b.x..b.x + b.w {
                    bits[(y * w + x) as usize] = true;
                }
            }
        }
        bits
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn unmasked_pixels_untouched_and_max_principle((img, mask) in image_and_mask()) {
            let out = inpaint_text(&img, &mask, &InpaintConfig::default());
            let bits = mask_bitmap(&img, &mask);
            let (w, h) = (img.width() as i64, img.height() as i64);
            let mut lo = u8::MAX;
            let mut hi = u8::MIN;
            for y in 0..h {
                for x in 0..w {
                    let i = (y * w + x) as usize;
                    if bits[i] { continue; }
                    let adjacent = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                        .iter()
                        .any(|&(nx, ny)| nx >= 0 && ny >= 0 && nx < w && ny < h && bits[(ny * w + nx) as usize]);
                    if adjacent {
                        lo = lo.min(img.as_raw()[i]);
                        hi = hi.max(img.as_raw()[i]);
                    }
                }
            }
            for (i, (&a, &b)) in img.as_raw().iter().zip(out.image.as_raw()).enumerate() {
                if !bits[i] {
                    prop_assert_eq!(a, b);
                } else if lo <= hi {
                    prop_assert!(b >= lo && b <= hi, "pixel {} = {} outside [{}, {}]", i, b, lo, hi);
                }
            }
            let again = inpaint_text(&img, &mask, &InpaintConfig::default());
            prop_assert_eq!(again, out);
        }
    }
}
