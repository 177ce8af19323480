//! Prototype explanations: the top-k most similar training images for a
//! probe, the neighbor vote and a pixel difference map against the rank-1
//! prototype, rendered as `reports/<image-id>/grid.png` plus `report.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::PrototypeIndex;
use crate::dataset::ImageSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    /// 1-based, by descending similarity.
    pub rank: usize,
    pub index_id: usize,
    pub image_ref: String,
    pub label: u8,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub image_ref: String,
    pub predicted_label: u8,
    pub true_label: Option<u8>,
    /// Neighbors used for the vote.
    pub knn_k: usize,
    pub soft_probabilities: [f64; 2],
    pub prototypes: Vec<PrototypeEntry>,
    pub image_size: usize,
    /// `test - prototype_1`, row-major.
    pub difference_map: Vec<f32>,
    #[serde(skip)]
    pub test_image: Vec<f32>,
    #[serde(skip)]
    pub prototype_images: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplainParams {
    /// Prototypes shown.
    pub k: usize,
    /// Neighbors in the label vote.
    pub knn_k: usize,
    pub tau_pred: f64,
}

/// Signed `test - prototype`.
pub fn difference_map(test: &[f32], prototype: &[f32]) -> Result<Vec<f32>> {
    if test.len() != prototype.len() {
        return Err(Error::Shape(format!(
            "test image has {} pixels, prototype {}",
            test.len(),
            prototype.len()
        )));
    }
    Ok(test.iter().zip(prototype).map(|(a, b)| a - b).collect())
}

/// `|signed|` scaled to 8 bits.
pub fn render_difference(signed: &[f32]) -> Vec<u8> {
    signed.iter().map(|v| to_u8(v.abs())).collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Builds the report for one probe. Prototype pixels come from `train`,
/// looked up by image reference.
pub fn explain(
    z: &[f32],
    image_ref: &str,
    test_image: &[f32],
    true_label: Option<u8>,
    index: &PrototypeIndex,
    train: &ImageSet,
    params: ExplainParams,
) -> Result<ExplanationReport> {
    if z.len() != index.dim() {
        return Err(Error::Shape(format!(
            "latent has {} dimensions, index {}",
            z.len(),
            index.dim()
        )));
    }
    let size = train.size();
    if test_image.len() != size * size {
        return Err(Error::Shape(format!(
            "test image has {} pixels, expected {size}x{size}",
            test_image.len()
        )));
    }
    let prediction = index.knn_predict(z, params.knn_k, None, params.tau_pred)?;
    let neighbors = index.nearest(z, params.k, None)?;
    let mut prototypes = Vec::with_capacity(neighbors.len());
    let mut prototype_images = Vec::with_capacity(neighbors.len());
    for (rank, n) in neighbors.into_iter().enumerate() {
        let pos = train.refs().iter().position(|r| *r == n.image_ref).ok_or_else(|| {
            Error::InvalidArgument(format!("prototype {} is not among the training images", n.image_ref))
        })?;
        prototype_images.push(train.image(pos).to_vec());
        prototypes.push(PrototypeEntry {
            rank: rank + 1,
            index_id: n.id,
            image_ref: n.image_ref,
            label: n.label,
            similarity: n.similarity,
        });
    }
    Ok(ExplanationReport {
        image_ref: image_ref.to_string(),
        predicted_label: prediction.label,
        true_label,
        knn_k: params.knn_k,
        soft_probabilities: prediction.soft_probabilities,
        difference_map: difference_map(test_image, &prototype_images[0])?,
        prototypes,
        image_size: size,
        test_image: test_image.to_vec(),
        prototype_images,
    })
}

/// Directory name for a reference: separators become `_`, extension dropped.
pub fn image_id(image_ref: &str) -> String {
    let stem = match image_ref.rfind('.') {
        Some(dot) if !image_ref[dot..].contains(['/', '\\']) => &image_ref[..dot],
        _ => image_ref,
    };
    stem.replace(['/', '\\'], "_").replace("..", "_")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub dir: PathBuf,
    pub grid: PathBuf,
    pub json: PathBuf,
}

/// Grid row (test | prototypes | |difference|) and JSON sidecar.
pub fn render_report(report: &ExplanationReport, reports_dir: impl AsRef<Path>) -> Result<RenderedReport> {
    let dir = reports_dir.as_ref().join(image_id(&report.image_ref));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let s = report.image_size;
    let mut tiles: Vec<Vec<u8>> = vec![report.test_image.iter().map(|&v| to_u8(v)).collect()];
    for p in &report.prototype_images {
        tiles.push(p.iter().map(|&v| to_u8(v)).collect());
    }
    tiles.push(render_difference(&report.difference_map));
    if tiles.iter().any(|t| t.len() != s * s) {
        return Err(Error::Shape("report images do not match the image size".into()));
    }
    let width = s * tiles.len();
    let mut grid = vec![0u8; width * s];
    for (i, tile) in tiles.iter().enumerate() {
        for y in 0..s {
            grid[y * width + i * s..y * width + (i + 1) * s].copy_from_slice(&tile[y * s..(y + 1) * s]);
        }
    }
    let grid_path = dir.join("grid.png");
    image::GrayImage::from_raw(width as u32, s as u32, grid)
        .expect("grid buffer matches dimensions")
        .save_with_format(&grid_path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: grid_path.clone(),
            message: e.to_string(),
        })?;
    let json_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(RenderedReport {
        dir,
        grid: grid_path,
        json: json_path,
    })
}
