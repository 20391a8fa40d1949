use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use super::{EncoderState, SslError};
use crate::blob::{load_matrix, save_matrix};
use crate::data::DatasetManifest;
use crate::nn::l2_normalize;
use crate::raster::{load_raster, Raster};

pub const EMBEDDING_KIND: &str = "fusc-embeddings";

/// Corpus representation, one row per image id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub vectors: Array2<f32>,
    pub normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, vectors: Array2<f32>, normalized: bool) -> Result<Self, SslError> {
        if ids.len() != vectors.nrows() {
            return Err(SslError::DimensionMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                vectors.nrows()
            )));
        }
        Ok(EmbeddingMatrix { ids, vectors, normalized })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Copy with every row scaled to unit length (zero rows stay zero).
    pub fn normalized(&self) -> Self {
        let mut v = self.vectors.clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        EmbeddingMatrix { ids: self.ids.clone(), vectors: v, normalized: true }
    }

    /// Rows whose ids appear in `keep`, in this matrix's order.
    pub fn select(&self, keep: &std::collections::BTreeSet<String>) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.ids[i])).collect();
        let vectors = self.vectors.select(ndarray::Axis(0), &rows);
        EmbeddingMatrix { ids: rows.iter().map(|&i| self.ids[i].clone()).collect(), vectors, normalized: self.normalized }
    }

    pub fn save(&self, path: &Path) -> Result<(), SslError> {
        let data: Vec<f32> = self.vectors.iter().copied().collect();
        let meta = serde_json::json!({ "normalized": self.normalized });
        save_matrix(path, EMBEDDING_KIND, &self.ids, self.dim(), &data, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SslError> {
        let (header, ids, data) = load_matrix(path, EMBEDDING_KIND)?;
        let normalized = header.meta.get("normalized").and_then(|v| v.as_bool()).unwrap_or(false);
        let vectors = Array2::from_shape_vec((header.rows, header.cols), data)
            .map_err(|e| SslError::DimensionMismatch(e.to_string()))?;
        Ok(EmbeddingMatrix { ids, vectors, normalized })
    }
}

/// Loads every manifest image at `size`×`size`, in manifest order.
pub fn load_rasters(manifest: &DatasetManifest, size: usize) -> Result<Vec<Raster>, SslError> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            load_raster(&r.pixel_path, size).map_err(|_| SslError::MissingImage {
                id: r.image_id.clone(),
                path: r.pixel_path.display().to_string(),
            })
        })
        .collect()
}

/// Embeds images already at the encoder's input size; rows are L2-normalised.
pub fn embed_rasters(encoder: &EncoderState, ids: Vec<String>, images: &[Raster]) -> Result<EmbeddingMatrix, SslError> {
    let backbone = encoder.config.backbone();
    let d = encoder.config.embedding_dim;
    let size = backbone.input_size();
    let rows: Vec<Vec<f32>> = images
        .par_iter()
        .map(|img| {
            let img = if img.width == size && img.height == size { img.clone() } else { img.resized(size) };
            l2_normalize(&encoder.represent(&backbone, &img)).0
        })
        .collect();
    let mut vectors = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        vectors.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    EmbeddingMatrix::new(ids, vectors, true)
}

/// Embeds every record of `manifest` without augmentation.
pub fn embed(encoder: &EncoderState, manifest: &DatasetManifest) -> Result<EmbeddingMatrix, SslError> {
    let images = load_rasters(manifest, encoder.config.input_size)?;
    let ids = manifest.records.iter().map(|r| r.image_id.clone()).collect();
    embed_rasters(encoder, ids, &images)
}
