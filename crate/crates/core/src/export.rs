//! Latent tables for external embedding tools and class-separation
//! statistics over them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageSet, Split};
use crate::error::{Error, Result};
use crate::train::{encode_set, load_model};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub image_ref: String,
    pub label: u8,
    pub z: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    dim: usize,
    rows: Vec<LatentRow>,
}

impl LatentTable {
    pub fn new(rows: Vec<LatentRow>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.z.len());
        let mut refs = std::collections::HashSet::new();
        for r in &rows {
            if r.z.len() != dim {
                return Err(Error::Shape(format!("row {} has {} values, expected {dim}", r.image_ref, r.z.len())));
            }
            if r.label > 1 {
                return Err(Error::InvalidArgument(format!("row {} has non-binary label {}", r.image_ref, r.label)));
            }
            if !refs.insert(r.image_ref.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate ref {}", r.image_ref)));
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[LatentRow] {
        &self.rows
    }

    /// CSV with header `ref,label,z0..z{d-1}`; values use the shortest
    /// representation that parses back to the same `f32`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let mut header = vec!["ref".to_string(), "label".to_string()];
        header.extend((0..self.dim).map(|i| format!("z{i}")));
        w.write_record(&header).map_err(io)?;
        for r in &self.rows {
            let mut record = vec![r.image_ref.clone(), r.label.to_string()];
            record.extend(r.z.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let bad = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
        let dim = header.len().saturating_sub(2);
        let expected: Vec<String> = ["ref".to_string(), "label".to_string()]
            .into_iter()
            .chain((0..dim).map(|i| format!("z{i}")))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(bad(1, "expected header ref,label,z0,...".into()));
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| bad(line, e.to_string()))?;
            let label = match &record[1] {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(line, format!("label must be 0 or 1, found {other:?}"))),
            };
            let z = record
                .iter()
                .skip(2)
                .map(|v| v.parse::<f32>().map_err(|e| bad(line, format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(LatentRow {
                image_ref: record[0].to_string(),
                label,
                z,
            });
        }
        Self::new(rows)
    }
}

/// Encodes one split with a saved model and writes the table.
pub fn export_latents(
    checkpoint: impl AsRef<Path>,
    manifest: &DatasetManifest,
    split: Split,
    out_path: impl AsRef<Path>,
) -> Result<LatentTable> {
    let (config, model) = load_model(checkpoint)?;
    let set = ImageSet::load(manifest, split, config.image_size)?;
    let latents = encode_set(&model, &set)?;
    let rows = latents
        .into_iter()
        .zip(set.refs().iter().zip(set.labels()))
        .map(|(z, (r, &label))| LatentRow {
            image_ref: r.clone(),
            label,
            z,
        })
        .collect();
    let table = LatentTable::new(rows)?;
    table.write_csv(out_path)?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    /// Mean cosine over all unordered same-class pairs.
    pub intra: f64,
    /// Mean cosine over all cross-class pairs.
    pub inter: f64,
    /// `intra - inter`.
    pub margin: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

/// Exact pair means, computed from per-class sums of unit vectors:
/// the same-class pair sum is `(|s|^2 - sum |u_i|^2) / 2` and the
/// cross-class sum is `s_0 . s_1`.
pub fn separation_stats(table: &LatentTable) -> Result<SeparationStats> {
    let d = table.dim();
    let mut sums = [vec![0.0f64; d], vec![0.0f64; d]];
    let mut self_dots = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for r in table.rows() {
        let n = r.z.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm(format!("latent of {}", r.image_ref)));
        }
        let c = r.label as usize;
        let mut sq = 0.0;
        for (s, &v) in sums[c].iter_mut().zip(&r.z) {
            let u = v as f64 / n;
            *s += u;
            sq += u * u;
        }
        self_dots[c] += sq;
        counts[c] += 1;
    }
    if let Some(c) = (0..2).find(|&c| counts[c] < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has {} rows, at least 2 are needed",
            counts[c]
        )));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let intra_sum: f64 = (0..2).map(|c| (dot(&sums[c], &sums[c]) - self_dots[c]) / 2.0).sum();
    let intra_pairs = counts.iter().map(|n| n * (n - 1) / 2).sum::<usize>();
    let inter_pairs = counts[0] * counts[1];
    let intra = intra_sum / intra_pairs as f64;
    let inter = dot(&sums[0], &sums[1]) / inter_pairs as f64;
    Ok(SeparationStats {
        intra,
        inter,
        margin: intra - inter,
        intra_pairs,
        inter_pairs,
    })
}
