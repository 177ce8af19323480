//! Cosine-similarity nearest-prototype classification.
//!
//! Neighbors are ranked by descending cosine similarity; equal similarities
//! are ordered by ascending prototype id (the row position in the index).
//! The predicted label is the majority label among the `K` neighbors, and a
//! tied vote (possible only for even `K`) goes to the rank-1 neighbor's label.
//!
//! # Index file layout
//!
//! All integers and floats are little-endian.
//!
//! | field     | type                         |
//! |-----------|------------------------------|
//! | magic     | 4 bytes, `PDIX`              |
//! | version   | `u32`, currently 1           |
//! | rows `N`  | `u64`                        |
//! | dim `d`   | `u32`                        |
//! | latents   | `N * d` `f32`, row-major     |
//! | labels    | `N` `u8` (0 or 1)            |
//! | refs      | `N` x (`u32` byte length, UTF-8 bytes) |

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::soft_class_probabilities;

const INDEX_MAGIC: &[u8; 4] = b"PDIX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

/// `a . b / (|a| |b|)`, computed in `f64`.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "latent lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub(crate) fn norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.into() * x.into()).sum::<f64>().sqrt()
}

/// Positions of the `k` highest similarities, skipping `exclude`, ordered by
/// descending similarity then ascending position.
pub(crate) fn top_k(similarities: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = (0..similarities.len())
        .filter(|&i| Some(i) != exclude)
        .collect();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if k > ids.len() {
        return Err(Error::NeighborCount {
            k,
            available: ids.len(),
        });
    }
    let order = |a: &usize, b: &usize| -> Ordering {
        similarities[*b]
            .partial_cmp(&similarities[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, order);
        ids.truncate(k);
    }
    ids.sort_by(order);
    Ok(ids)
}

/// Majority label, ties resolved to the first (most similar) label.
pub fn mode_label(ranked_labels: &[u8]) -> u8 {
    let ones = ranked_labels.iter().filter(|&&l| l == 1).count();
    let zeros = ranked_labels.len() - ones;
    match ones.cmp(&zeros) {
        Ordering::Greater => 1,
        Ordering::Less => 0,
        Ordering::Equal => ranked_labels.first().copied().unwrap_or(0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Row position in the index.
    pub id: usize,
    pub image_ref: String,
    pub label: u8,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    /// Neighbors in descending similarity.
    pub neighbors: Vec<Neighbor>,
    /// Similarity-softmax vote `[p(0), p(1)]`.
    pub soft_probabilities: [f64; 2],
}

/// Training-set latents with labels and image references.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeIndex {
    dim: usize,
    latents: Vec<f32>,
    labels: Vec<u8>,
    refs: Vec<String>,
    norms: Vec<f64>,
}

impl PrototypeIndex {
    pub fn build(latents: Vec<Vec<f32>>, labels: Vec<u8>, image_refs: Vec<String>) -> Result<Self> {
        let dim = latents.first().map(Vec::len).ok_or(Error::EmptyIndex)?;
        if latents.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("latent rows have different lengths".into()));
        }
        Self::from_flat(dim, latents.into_iter().flatten().collect(), labels, image_refs)
    }

    pub fn from_flat(dim: usize, latents: Vec<f32>, labels: Vec<u8>, image_refs: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if dim == 0 || latents.len() != labels.len() * dim || image_refs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} latent values (dim {dim}), {} labels and {} refs are inconsistent",
                latents.len(),
                labels.len(),
                image_refs.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("non-binary label {l}")));
        }
        let mut norms = Vec::with_capacity(labels.len());
        for (i, row) in latents.chunks(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite latent for {}",
                    image_refs[i]
                )));
            }
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm(format!("prototype {}", image_refs[i])));
            }
            norms.push(n);
        }
        Ok(Self {
            dim,
            latents,
            labels,
            refs: image_refs,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent(&self, id: usize) -> &[f32] {
        &self.latents[id * self.dim..(id + 1) * self.dim]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image_refs(&self) -> &[String] {
        &self.refs
    }

    pub fn position(&self, image_ref: &str) -> Option<usize> {
        self.refs.iter().position(|r| r == image_ref)
    }

    fn check_query(&self, z: &[f32]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!(
                "query has {} dims, index has {}",
                z.len(),
                self.dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite query latent".into()));
        }
        let n = norm(z);
        if n == 0.0 {
            return Err(Error::ZeroNorm("query".into()));
        }
        Ok(n)
    }

    /// Cosine similarity of `z` to every prototype.
    pub fn similarities(&self, z: &[f32]) -> Result<Vec<f64>> {
        let qn = self.check_query(z)?;
        Ok(self
            .latents
            .chunks(self.dim)
            .zip(&self.norms)
            .map(|(row, n)| {
                let dot: f64 = row.iter().zip(z).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot / (n * qn)).clamp(-1.0, 1.0)
            })
            .collect())
    }

    pub fn similarity_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| self.similarities(self.latent(i)).expect("rows validated at build"))
            .collect()
    }

    /// The `k` most similar prototypes, optionally excluding one id.
    pub fn nearest(&self, z: &[f32], k: usize, exclude: Option<usize>) -> Result<Vec<Neighbor>> {
        let sims = self.similarities(z)?;
        Ok(top_k(&sims, k, exclude)?
            .into_iter()
            .map(|id| Neighbor {
                id,
                image_ref: self.refs[id].clone(),
                label: self.labels[id],
                similarity: sims[id],
            })
            .collect())
    }

    pub fn knn_predict(
        &self,
        z: &[f32],
        k: usize,
        exclude: Option<usize>,
        tau_pred: f64,
    ) -> Result<Prediction> {
        let neighbors = self.nearest(z, k, exclude)?;
        let ranked: Vec<u8> = neighbors.iter().map(|n| n.label).collect();
        let votes: Vec<(u8, f64)> = neighbors.iter().map(|n| (n.label, n.similarity)).collect();
        Ok(Prediction {
            label: mode_label(&ranked),
            soft_probabilities: soft_class_probabilities(&votes, tau_pred)?,
            neighbors,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.latents {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.labels)?;
        for r in &self.refs {
            w.write_all(&(r.len() as u32).to_le_bytes())?;
            w.write_all(r.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fail = |m: &str| Error::IndexFormat(m.to_string());
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::IndexFormat(e.to_string()))?;
        let mut cursor = &buf[..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(fail("truncated file"));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(4)? != INDEX_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let latent_bytes = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| fail("header overflow"))?;
        let latents = take(latent_bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = take(n)?.to_vec();
        let mut refs = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let s = std::str::from_utf8(take(len)?).map_err(|_| fail("image ref is not UTF-8"))?;
            refs.push(s.to_string());
        }
        if !cursor.is_empty() {
            return Err(fail("trailing bytes"));
        }
        Self::from_flat(dim, latents, labels, refs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn refs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i}")).collect()
    }

    fn random_index(n: usize, d: usize, seed: u64) -> PrototypeIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        PrototypeIndex::build(rows, labels, refs(n)).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f64, -2.0, 5.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - 0.70711).abs() < 1e-5);
        assert!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine_similarity(&[1.0f64], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            PrototypeIndex::build(vec![], vec![], vec![]),
            Err(Error::EmptyIndex)
        ));
        assert!(PrototypeIndex::build(vec![vec![1.0]], vec![0, 1], refs(2)).is_err());
        match PrototypeIndex::build(vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![0, 1], refs(2)) {
            Err(Error::ZeroNorm(msg)) => assert!(msg.contains("img1")),
            other => panic!("{other:?}"),
        }
        assert!(PrototypeIndex::build(vec![vec![1.0]], vec![2], refs(1)).is_err());
    }

    #[test]
    fn toy_similarity_matrix() {
        let rows = vec![vec![1.0f32, 0.0], vec![1.0, 1.0], vec![-2.0, 0.5]];
        let idx = PrototypeIndex::build(rows.clone(), vec![0, 1, 0], refs(3)).unwrap();
        let m = idx.similarity_matrix();
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (&rows[i], &rows[j]);
                let direct = (a[0] as f64 * b[0] as f64 + a[1] as f64 * b[1] as f64)
                    / ((a[0] as f64).hypot(a[1] as f64) * (b[0] as f64).hypot(b[1] as f64));
                assert!((m[i][j] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k1_and_majority() {
        let rows = vec![
            vec![1.0f32, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
        ];
        let idx = PrototypeIndex::build(rows, vec![1, 0, 0], refs(3)).unwrap();
        let p = idx.knn_predict(&[1.0, 0.01], 1, None, 0.1).unwrap();
        assert_eq!(p.label, 1);
        assert_eq!(p.neighbors[0].id, 0);
        assert_eq!(mode_label(&[1, 1, 0, 1, 0, 1, 1]), 1);
        assert_eq!(mode_label(&[0, 1, 1, 0]), 0);
        assert_eq!(mode_label(&[1, 0]), 1);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let rows = vec![vec![0.0f32, 1.0], vec![1.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]];
        let idx = PrototypeIndex::build(rows, vec![0, 1, 0, 1], refs(4)).unwrap();
        let ids: Vec<usize> = idx.nearest(&[1.0, 0.0], 3, None).unwrap().iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[test]
    fn k_bounds_and_query_errors() {
        let idx = random_index(5, 3, 1);
        assert!(matches!(
            idx.knn_predict(&[1.0, 0.0, 0.0], 5, Some(0), 0.1),
            Err(Error::NeighborCount { k: 5, available: 4 })
        ));
        assert!(idx.knn_predict(&[1.0, 0.0, 0.0], 0, None, 0.1).is_err());
        assert!(matches!(
            idx.knn_predict(&[0.0, 0.0, 0.0], 1, None, 0.1),
            Err(Error::ZeroNorm(_))
        ));
        assert!(idx.knn_predict(&[1.0, 0.0], 1, None, 0.1).is_err());
    }

    #[test]
    fn brute_force_oracle_agreement() {
        let idx = random_index(200, 8, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let mut all: Vec<(f64, usize)> = (0..200)
                .map(|i| {
                    let row = idx.latent(i);
                    let dot: f64 = row.iter().zip(&q).map(|(a, b)| *a as f64 * *b as f64).sum();
                    let na: f64 = row.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                    let nb: f64 = q.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                    (dot / (na * nb), i)
                })
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for k in [1, 3, 7, 15] {
                let p = idx.knn_predict(&q, k, None, 0.1).unwrap();
                let ones = all[..k].iter().filter(|(_, i)| idx.labels()[*i] == 1).count();
                let expected = if 2 * ones > k { 1 } else { 0 };
                assert_eq!(p.label, expected);
                for (n, (s, i)) in p.neighbors.iter().zip(&all[..k]) {
                    assert_eq!(n.id, *i);
                    assert!((n.similarity - s).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let idx = random_index(60, 5, 3);
        let mut bytes = Vec::new();
        idx.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PDIX");
        let back = PrototypeIndex::read_from(&mut &bytes[..]).unwrap();
        assert_eq!(back, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let q: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            assert_eq!(
                idx.knn_predict(&q, 7, None, 0.1).unwrap(),
                back.knn_predict(&q, 7, None, 0.1).unwrap()
            );
        }
        assert!(PrototypeIndex::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PrototypeIndex::read_from(&mut &bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn positive_rescaling_keeps_the_decision(seed in 0u64..1000, scale in 0.01f32..100.0, k in 1usize..10) {
            let idx = random_index(40, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let q: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let scaled: Vec<f32> = q.iter().map(|v| v * scale).collect();
            let a = idx.knn_predict(&q, k, None, 0.1).unwrap();
            let b = idx.knn_predict(&scaled, k, None, 0.1).unwrap();
            prop_assert_eq!(a.label, b.label);
            let ids_a: Vec<usize> = a.neighbors.iter().map(|n| n.id).collect();
            let ids_b: Vec<usize> = b.neighbors.iter().map(|n| n.id).collect();
            prop_assert_eq!(ids_a, ids_b);
        }

        #[test]
        fn excluded_probe_never_returned(seed in 0u64..1000, k in 1usize..20) {
            let idx = random_index(30, 3, seed);
            for probe in 0..idx.len() {
                let p = idx.knn_predict(idx.latent(probe), k, Some(probe), 0.1).unwrap();
                prop_assert!(p.neighbors.iter().all(|n| n.id != probe));
            }
        }

        #[test]
        fn odd_k_gives_strict_majority(seed in 0u64..1000, half in 0usize..7) {
            let k = 2 * half + 1;
            let idx = random_index(30, 3, seed);
            let p = idx.knn_predict(idx.latent(0), k, None, 0.1).unwrap();
            let ones = p.neighbors.iter().filter(|n| n.label == 1).count();
            prop_assert_eq!(p.label == 1, 2 * ones > k);
        }

        #[test]
        fn duplicating_top_neighbor_keeps_majority(seed in 0u64..1000, half in 0usize..5) {
            let k = 2 * half + 1;
            let idx = random_index(25, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let q: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let before = idx.knn_predict(&q, k, None, 0.1).unwrap();
            let top = before.neighbors[0].id;
            if idx.labels()[top] == before.label {
                let mut rows: Vec<Vec<f32>> = (0..idx.len()).map(|i| idx.latent(i).to_vec()).collect();
                let mut labels = idx.labels().to_vec();
                rows.push(idx.latent(top).to_vec());
                labels.push(idx.labels()[top]);
                let grown = PrototypeIndex::build(rows, labels, refs(idx.len() + 1)).unwrap();
                let after = grown.knn_predict(&q, k + 1, None, 0.1).unwrap();
                prop_assert_eq!(after.label, before.label);
            }
        }
    }
}
