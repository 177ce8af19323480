//! Manifest handling, image loading, class-balanced batching and the
//! synthetic two-class corpus.
//!
//! A manifest is a UTF-8 CSV with header `path,label,split`. Paths are
//! relative to the manifest's directory (absolute paths are accepted too),
//! labels are `0` or `1`, splits are `train`, `val` or `test`.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Path as written in the manifest; used as the image reference.
    pub image_ref: String,
    /// Resolved location on disk.
    pub path: PathBuf,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    label: String,
    split: String,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let manifest_err = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header = reader.headers().map_err(|e| manifest_err(1, e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(manifest_err(1, format!("expected header path,label,split, found {}", header.iter().collect::<Vec<_>>().join(","))));
        }

        let mut records = Vec::new();
        let mut seen: HashMap<PathBuf, (Split, usize)> = HashMap::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                manifest_err(line, e.to_string())
            })?;
            let line = records.len() + 2;
            let label = match row.label.as_str() {
                "0" => 0u8,
                "1" => 1u8,
                other => return Err(manifest_err(line, format!("label must be 0 or 1, found {other:?}"))),
            };
            let split: Split = row.split.parse().map_err(|e: Error| manifest_err(line, e.to_string()))?;
            let resolved = root.join(&row.path);
            let canonical = resolved
                .canonicalize()
                .map_err(|_| manifest_err(line, format!("image {} does not exist", resolved.display())))?;
            if let Some((other, first)) = seen.get(&canonical) {
                return Err(if *other != split {
                    Error::SplitLeakage(format!(
                        "{} appears in {other} (line {first}) and {split} (line {line})",
                        row.path
                    ))
                } else {
                    manifest_err(line, format!("duplicate entry for {} (first on line {first})", row.path))
                });
            }
            seen.insert(canonical, (split, line));
            records.push(ManifestRecord {
                image_ref: row.path,
                path: resolved,
                label,
                split,
            });
        }
        Ok(Self { root, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_manifest(path, self.records.iter().map(|r| (r.image_ref.as_str(), r.label, r.split)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// `[count(label 0), count(label 1)]` within a split.
    pub fn class_counts(&self, split: Split) -> [usize; 2] {
        let mut counts = [0; 2];
        for r in self.split(split) {
            counts[r.label as usize] += 1;
        }
        counts
    }
}

fn write_manifest<'a>(path: &Path, rows: impl Iterator<Item = (&'a str, u8, Split)>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    writer.write_record(["path", "label", "split"]).map_err(|e| csv_io(path, e))?;
    for (image_ref, label, split) in rows {
        writer
            .write_record([image_ref, &label.to_string(), split.as_str()])
            .map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Reads any grayscale-convertible raster, normalizes to `[0, 1]` and
/// resizes bilinearly to `size x size`. Row-major output.
pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "zero-byte file".into(),
        });
    }
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    let pixels: Vec<f32> = luma.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(resize_bilinear(&pixels, w as usize, h as usize, size, size))
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(src.len(), width * height, "source buffer does not match its dimensions");
    if width == out_w && height == out_h {
        return src.to_vec();
    }
    let taps = |n_in: usize, n_out: usize, o: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, fy) = taps(height, out_h, oy);
        for ox in 0..out_w {
            let (x0, x1, fx) = taps(width, out_w, ox);
            let p = |x: usize, y: usize| src[y * width + x] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// A split loaded into memory.
#[derive(Debug, Clone)]
pub struct ImageSet {
    size: usize,
    refs: Vec<String>,
    labels: Vec<u8>,
    pixels: Vec<f32>,
}

impl ImageSet {
    pub fn load(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Self> {
        let mut set = Self {
            size,
            refs: Vec::new(),
            labels: Vec::new(),
            pixels: Vec::new(),
        };
        for r in manifest.split(split) {
            set.pixels.extend(load_image(&r.path, size)?);
            set.refs.push(r.image_ref.clone());
            set.labels.push(r.label);
        }
        Ok(set)
    }

    pub fn from_parts(size: usize, refs: Vec<String>, labels: Vec<u8>, pixels: Vec<f32>) -> Result<Self> {
        if refs.len() != labels.len() || pixels.len() != refs.len() * size * size {
            return Err(Error::Shape(format!(
                "{} refs, {} labels and {} pixels for {size}x{size} images",
                refs.len(),
                labels.len(),
                pixels.len()
            )));
        }
        Ok(Self {
            size,
            refs,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn refs(&self) -> &[String] {
        &self.refs
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[B, 1, size, size]` tensor of the selected images.
    pub fn batch(&self, ids: &[usize], device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.size * self.size);
        for &i in ids {
            data.extend_from_slice(self.image(i));
        }
        Ok(Tensor::from_vec(data, (ids.len(), 1, self.size, self.size), device)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    /// Images per class in every batch.
    pub per_class: usize,
    pub seed: u64,
}

/// One epoch of batch index lists over `labels`. Each batch holds the
/// `per_class` class-0 ids followed by the `per_class` class-1 ids. The
/// majority class sets the epoch length and is used at most once; the
/// minority class is drawn from a reshuffled cycle when exhausted.
pub fn balanced_batches(labels: &[u8], spec: BatchSpec, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let m = spec.per_class;
    if m == 0 {
        return Err(Error::InvalidArgument("per-class batch count must be at least 1".into()));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(Error::InvalidArgument(format!("non-binary label {l} at {i}")));
        }
        by_class[l as usize].push(i);
    }
    for (c, ids) in by_class.iter().enumerate() {
        if ids.len() < m {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} members, fewer than {m} per batch",
                ids.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(epoch);
    let major = if by_class[1].len() > by_class[0].len() { 1 } else { 0 };
    let batches = by_class[major].len() / m;
    let mut major_ids = by_class[major].clone();
    major_ids.shuffle(&mut rng);
    let mut minor_pool = by_class[1 - major].clone();
    minor_pool.shuffle(&mut rng);
    let mut cursor = 0;
    let mut out = Vec::with_capacity(batches);
    for b in 0..batches {
        let mut minor = Vec::with_capacity(m);
        while minor.len() < m {
            if cursor == minor_pool.len() {
                minor_pool.shuffle(&mut rng);
                cursor = 0;
            }
            minor.push(minor_pool[cursor]);
            cursor += 1;
        }
        let major_part = &major_ids[b * m..(b + 1) * m];
        let mut batch = Vec::with_capacity(2 * m);
        if major == 0 {
            batch.extend_from_slice(major_part);
            batch.extend(minor);
        } else {
            batch.extend(minor);
            batch.extend_from_slice(major_part);
        }
        out.push(batch);
    }
    Ok(out)
}

/// Per-class image counts for each split of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SyntheticCounts {
    /// 80/10/10 split of `n` images per class.
    pub fn split(n: usize) -> Self {
        let val = n / 10;
        let test = n / 10;
        Self {
            train: n - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Writes `class0/NNNNN.png`, `class1/NNNNN.png` and `manifest.csv` with an
/// 80/10/10 split per class.
pub fn generate_synthetic_dataset(
    n_per_class: usize,
    image_size: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    generate_synthetic_counts(SyntheticCounts::split(n_per_class), image_size, seed, out_dir)
}

pub fn generate_synthetic_counts(
    counts: SyntheticCounts,
    image_size: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if image_size < 8 {
        return Err(Error::InvalidArgument(format!("image size {image_size} is too small")));
    }
    let mut rows = Vec::new();
    for label in 0..2u8 {
        let dir = out_dir.join(format!("class{label}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label as u64);
        for i in 0..counts.total() {
            let pixels = synthetic_image(&mut rng, image_size, label == 1);
            let name = format!("class{label}/{i:05}.png");
            let path = out_dir.join(&name);
            image::GrayImage::from_raw(image_size as u32, image_size as u32, pixels)
                .expect("buffer size matches dimensions")
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            let split = if i < counts.train {
                Split::Train
            } else if i < counts.train + counts.val {
                Split::Val
            } else {
                Split::Test
            };
            rows.push((name, label, split));
        }
    }
    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, rows.iter().map(|(n, l, s)| (n.as_str(), *l, *s)))?;
    DatasetManifest::load(manifest_path)
}

/// One 8-bit image: a soft-edged filled ellipse on a dark background. With
/// `holes`, two or three smooth dark voids are carved near the center.
fn synthetic_image(rng: &mut ChaCha8Rng, size: usize, holes: bool) -> Vec<u8> {
    let scale = size as f64 / 32.0;
    let c = (size as f64 - 1.0) / 2.0;
    let cx = c + rng.random_range(-1.5..1.5) * scale;
    let cy = c + rng.random_range(-1.5..1.5) * scale;
    let a = rng.random_range(10.0..14.0) * scale;
    let b = rng.random_range(10.0..14.0) * scale;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let brightness = rng.random_range(0.7..0.9);
    let (sin, cos) = theta.sin_cos();

    let mut voids = Vec::new();
    if holes {
        let n = rng.random_range(2..=3);
        for _ in 0..n {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(0.0..3.5) * scale;
            let radius = rng.random_range(2.0..3.5) * scale;
            voids.push((cx + dist * angle.cos(), cy + dist * angle.sin(), radius));
        }
    }

    let noise = Normal::new(0.0, 0.02).expect("valid deviation");
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            // approximate signed distance to the boundary in pixels
            let edge = (1.0 - (u * u + v * v).sqrt()) * a.min(b);
            let mut value = brightness / (1.0 + (-2.0 * edge).exp());
            for &(hx, hy, r) in &voids {
                let d = ((x as f64 - hx).powi(2) + (y as f64 - hy).powi(2)).sqrt();
                value *= 1.0 - 0.9 / (1.0 + (2.0 * (d - r)).exp());
            }
            value += noise.sample(rng);
            out.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)])).save(path).unwrap();
    }

    fn fixture(rows: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png", "c.png", "d.png"] {
            write_png(&dir.path().join(name), 4, 4, |_, _| 10);
        }
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, format!("path,label,split\n{rows}")).unwrap();
        (dir, manifest)
    }

    #[test]
    fn loads_valid_manifest() {
        let (_dir, path) = fixture("a.png,0,train\nb.png,1,train\nc.png,1,val\nd.png,0,test\n");
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.records().len(), 4);
        assert_eq!(m.class_counts(Split::Train), [1, 1]);
        assert_eq!(m.class_counts(Split::Val), [0, 1]);
        assert_eq!(m.class_counts(Split::Test), [1, 0]);
        assert_eq!(m.records()[2].image_ref, "c.png");
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let (_dir, path) = fixture("a.png,0,train\nb.png,2,train\n");
        match DatasetManifest::load(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let (_dir, path) = fixture("a.png,0,train\nmissing.png,1,test\n");
        match DatasetManifest::load(&path) {
            Err(Error::Manifest { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("does not exist"));
            }
            other => panic!("{other:?}"),
        }
        let (_dir, path) = fixture("a.png,0,holdout\n");
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Manifest { line: 2, .. })));
        let (_dir, path) = fixture("a.png,0\n");
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Manifest { .. })));
        assert!(matches!(DatasetManifest::load("/nonexistent/manifest.csv"), Err(Error::Io { .. })));
    }

    #[test]
    fn leakage_is_rejected() {
        let (_dir, path) = fixture("a.png,0,train\nb.png,1,train\n./a.png,0,test\n");
        match DatasetManifest::load(&path) {
            Err(e @ Error::SplitLeakage(_)) => assert!(e.to_string().contains("split leakage")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_write_round_trip() {
        let (dir, path) = fixture("a.png,0,train\nb.png,1,val\n");
        let m = DatasetManifest::load(&path).unwrap();
        let copy = dir.path().join("copy.csv");
        m.write(&copy).unwrap();
        assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn mid_gray_normalizes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        write_png(&p, 8, 8, |_, _| 128);
        let img = load_image(&p, 8).unwrap();
        assert!(img.iter().all(|&v| v == 128.0 / 255.0));
        let resized = load_image(&p, 3).unwrap();
        assert_eq!(resized.len(), 9);
        assert!(resized.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-7));
    }

    #[test]
    fn unreadable_images_fail() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.png");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(load_image(&empty, 4), Err(Error::Image { .. })));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(load_image(&junk, 4), Err(Error::Image { .. })));
    }

    #[test]
    fn rgb_input_is_converted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::RgbImage::from_fn(5, 5, |_, _| image::Rgb([200, 200, 200])).save(&p).unwrap();
        let img = load_image(&p, 5).unwrap();
        assert!(img.iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-6));
    }

    /// Separable form: one interpolation matrix per axis, applied as
    /// `R_y * S * R_x^T`, with weights accumulated from the continuous
    /// sample positions.
    fn reference_resize(src: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
        let matrix = |n_in: usize, n_out: usize| {
            let mut m = vec![vec![0.0f64; n_in]; n_out];
            for (o, row) in m.iter_mut().enumerate() {
                let pos = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
                let pos = pos.max(0.0).min((n_in - 1) as f64);
                for (i, weight) in row.iter_mut().enumerate() {
                    *weight = (1.0 - (pos - i as f64).abs()).max(0.0);
                }
            }
            m
        };
        let rx = matrix(w, ow);
        let ry = matrix(h, oh);
        let mut tmp = vec![0.0f64; h * ow];
        for y in 0..h {
            for ox in 0..ow {
                tmp[y * ow + ox] = (0..w).map(|x| rx[ox][x] * src[y * w + x] as f64).sum();
            }
        }
        let mut out = vec![0.0f64; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                out[oy * ow + ox] = (0..h).map(|y| ry[oy][y] * tmp[y * ow + ox]).sum();
            }
        }
        out
    }

    #[test]
    fn gradient_resize_matches_reference() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grad.png");
        write_png(&p, 130, 130, |x, y| ((x * 255 / 129 + y * 37) % 256) as u8);
        let src: Vec<f32> = image::open(&p).unwrap().to_luma32f().into_raw();
        let ours = load_image(&p, 64).unwrap();
        let reference = reference_resize(&src, 130, 130, 64, 64);
        for (a, b) in ours.iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1.0 / 255.0);
        }
        let same = reference_resize(&src, 130, 130, 130, 130);
        let identity = resize_bilinear(&src, 130, 130, 130, 130);
        for (a, b) in identity.iter().zip(&same) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
        let up = resize_bilinear(&src[..130 * 10].to_vec(), 130, 10, 17, 45);
        for (a, b) in up.iter().zip(&reference_resize(&src[..1300], 130, 10, 17, 45)) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        write_png(&p, 16, 16, |x, y| (x * 13 + y * 3) as u8);
        let first = load_image(&p, 16).unwrap();
        let q = dir.path().join("again.png");
        let bytes: Vec<u8> = first.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(16, 16, bytes).unwrap().save(&q).unwrap();
        let second = load_image(&q, 16).unwrap();
        for (a, b) in first.iter().zip(&second) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn equal_classes_give_two_clean_batches() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let spec = BatchSpec { per_class: 5, seed: 9 };
        let batches = balanced_batches(&labels, spec, 0).unwrap();
        assert_eq!(batches.len(), 2);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        for b in &batches {
            assert!(b[..5].iter().all(|&i| labels[i] == 0));
            assert!(b[5..].iter().all(|&i| labels[i] == 1));
        }
    }

    #[test]
    fn imbalanced_classes_reuse_minority_evenly() {
        let mut labels = vec![0u8; 100];
        labels.extend(vec![1u8; 10]);
        let spec = BatchSpec { per_class: 5, seed: 3 };
        let batches = balanced_batches(&labels, spec, 4).unwrap();
        assert_eq!(batches.len(), 20);
        let mut counts = vec![0usize; 110];
        for b in &batches {
            assert_eq!(b.iter().filter(|&&i| labels[i] == 0).count(), 5);
            for &i in b {
                counts[i] += 1;
            }
        }
        // 100 majority slots, each item once; 100 minority slots over 10 items
        assert!(counts[..100].iter().all(|&c| c == 1));
        assert!(counts[100..].iter().all(|&c| c == 10));
    }

    #[test]
    fn batches_are_seeded() {
        let labels: Vec<u8> = (0..37).map(|i| (i % 3 == 0) as u8).collect();
        let spec = BatchSpec { per_class: 4, seed: 21 };
        assert_eq!(balanced_batches(&labels, spec, 2).unwrap(), balanced_batches(&labels, spec, 2).unwrap());
        assert_ne!(balanced_batches(&labels, spec, 2).unwrap(), balanced_batches(&labels, spec, 3).unwrap());
        let other = BatchSpec { seed: 22, ..spec };
        assert_ne!(balanced_batches(&labels, spec, 2).unwrap(), balanced_batches(&labels, other, 2).unwrap());
        assert!(balanced_batches(&labels, BatchSpec { per_class: 14, seed: 0 }, 0).is_err());
        assert!(balanced_batches(&labels, BatchSpec { per_class: 0, seed: 0 }, 0).is_err());
    }

    fn central_mean(set: &ImageSet, i: usize) -> f64 {
        let s = set.size();
        let lo = s / 2 - 5;
        let img = set.image(i);
        let mut total = 0.0;
        for y in lo..lo + 10 {
            for x in lo..lo + 10 {
                total += img[y * s + x] as f64;
            }
        }
        total / 100.0
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_planted() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic_dataset(100, 32, 7, a.path()).unwrap();
        generate_synthetic_dataset(100, 32, 7, b.path()).unwrap();
        for r in ma.records() {
            let other = b.path().join(&r.image_ref);
            assert_eq!(std::fs::read(&r.path).unwrap(), std::fs::read(other).unwrap());
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.csv")).unwrap(),
            std::fs::read(b.path().join("manifest.csv")).unwrap()
        );
        assert_eq!(ma.class_counts(Split::Train), [80, 80]);
        assert_eq!(ma.class_counts(Split::Val), [10, 10]);
        assert_eq!(ma.class_counts(Split::Test), [10, 10]);

        let mut means = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for split in Split::ALL {
            let set = ImageSet::load(&ma, split, 32).unwrap();
            for i in 0..set.len() {
                let l = set.labels()[i] as usize;
                means[l] += central_mean(&set, i);
                counts[l] += 1;
            }
        }
        let gap = means[0] / counts[0] as f64 - means[1] / counts[1] as f64;
        assert!(gap > 0.05, "planted gap {gap}");
    }

    #[test]
    fn image_set_batches() {
        let set = ImageSet::from_parts(2, vec!["a".into(), "b".into()], vec![0, 1], (0..8).map(|v| v as f32).collect()).unwrap();
        let t = set.batch(&[1, 0], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 1, 2, 2]);
        assert_eq!(t.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![4., 5., 6., 7., 0., 1., 2., 3.]);
        assert!(ImageSet::from_parts(2, vec!["a".into()], vec![0], vec![0.0; 3]).is_err());
    }
}
