//! Training objectives: conditioned noise-prediction MSE, class-contrastive
//! loss, soft nearest-neighbor prediction loss and their sum.
//!
//! The scalar functions work on plain `f64` data and serve as the reference
//! forms. The tensor functions are the differentiable versions used for
//! training; they select neighbors on detached similarities and differentiate
//! through the similarity-softmax over the selected set.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::classifier::{mode_label, norm, top_k};
use crate::error::{Error, Result};
use crate::network::NoisePredictor;
use crate::schedule::NoiseSchedule;

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub tau_pred: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            tau_pred: 0.1,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.tau_pred > 0.0 && self.tau_pred.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperatures must be positive, got tau={} tau_pred={}",
                self.tau, self.tau_pred
            )));
        }
        Ok(())
    }
}

/// `M` latents per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPartition {
    positives: Vec<Vec<f64>>,
    negatives: Vec<Vec<f64>>,
}

impl ClassPartition {
    pub fn new(positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>) -> Result<Self> {
        if positives.len() != negatives.len() {
            return Err(Error::Shape(format!(
                "{} class-1 rows vs {} class-2 rows",
                positives.len(),
                negatives.len()
            )));
        }
        if positives.len() < 2 {
            return Err(Error::InvalidArgument(
                "contrastive loss needs at least 2 latents per class".into(),
            ));
        }
        let d = positives[0].len();
        for row in positives.iter().chain(&negatives) {
            if row.len() != d {
                return Err(Error::Shape("latent rows have different lengths".into()));
            }
            if norm(row) == 0.0 {
                return Err(Error::ZeroNorm("row of the class partition".into()));
            }
        }
        Ok(Self {
            positives,
            negatives,
        })
    }

    pub fn per_class(&self) -> usize {
        self.positives.len()
    }

    pub fn positives(&self) -> &[Vec<f64>] {
        &self.positives
    }

    pub fn negatives(&self) -> &[Vec<f64>] {
        &self.negatives
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric supervised contrastive loss over both classes as anchors:
/// `-log(sum_same exp(s/tau) / (sum_same exp(s/tau) + sum_other exp(s/tau)))`,
/// self-pairs excluded, averaged over all `2M` anchors.
pub fn contrastive_loss(partition: &ClassPartition, config: &ContrastConfig) -> Result<f64> {
    config.validate()?;
    let classes = [partition.positives(), partition.negatives()];
    let mut total = 0.0;
    let mut anchors = 0usize;
    for (c, rows) in classes.iter().enumerate() {
        let others = classes[1 - c];
        for (i, anchor) in rows.iter().enumerate() {
            let mut same = Vec::with_capacity(rows.len() - 1);
            for (j, row) in rows.iter().enumerate() {
                if j != i {
                    same.push(crate::classifier::cosine_similarity(anchor, row)? / config.tau);
                }
            }
            let mut all = same.clone();
            for row in others.iter() {
                all.push(crate::classifier::cosine_similarity(anchor, row)? / config.tau);
            }
            let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pos: f64 = same.iter().map(|s| (s - max).exp()).sum();
            total += -(pos.max(LOG_FLOOR).ln() + max - log_sum_exp(&all));
            anchors += 1;
        }
    }
    Ok(total / anchors as f64)
}

/// Similarity-softmax vote over labelled neighbors, `[p(0), p(1)]`.
pub fn soft_class_probabilities(neighbors: &[(u8, f64)], tau_pred: f64) -> Result<[f64; 2]> {
    if neighbors.is_empty() {
        return Err(Error::InvalidArgument("empty neighbor list".into()));
    }
    if !(tau_pred > 0.0) {
        return Err(Error::InvalidArgument(format!("tau_pred must be positive, got {tau_pred}")));
    }
    let max = neighbors
        .iter()
        .map(|(_, s)| s / tau_pred)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut mass = [0.0f64; 2];
    for &(label, s) in neighbors {
        if label > 1 {
            return Err(Error::InvalidArgument(format!("non-binary label {label}")));
        }
        mass[label as usize] += (s / tau_pred - max).exp();
    }
    let total = mass[0] + mass[1];
    Ok([mass[0] / total, mass[1] / total])
}

/// Mean cross-entropy of soft predictions against binary labels.
pub fn prediction_loss(probabilities: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in probabilities.iter().zip(labels) {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("probability outside [0, 1]: {p:?}")));
        }
        if y > 1 {
            return Err(Error::InvalidArgument(format!("non-binary label {y}")));
        }
        total += -p[y as usize].max(LOG_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diffusion: f64,
    pub contrast: f64,
    pub prediction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            diffusion: 1.0,
            contrast: 1.0,
            prediction: 1.0,
        }
    }
}

/// Which loss terms are active in the current phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMask {
    pub diffusion: bool,
    pub contrast: bool,
    pub prediction: bool,
}

impl PhaseMask {
    pub const ALL: Self = Self {
        diffusion: true,
        contrast: true,
        prediction: true,
    };
    pub const WARMUP: Self = Self {
        diffusion: true,
        contrast: false,
        prediction: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub diffusion: f64,
    pub contrast: f64,
    pub prediction: f64,
}

/// Weighted sum of the active components; non-finite components are rejected.
pub fn total_loss(parts: LossComponents, weights: LossWeights, mask: PhaseMask) -> Result<f64> {
    let terms = [
        ("diffusion", parts.diffusion, weights.diffusion, mask.diffusion),
        ("contrast", parts.contrast, weights.contrast, mask.contrast),
        ("prediction", parts.prediction, weights.prediction, mask.prediction),
    ];
    let mut sum = 0.0;
    for (name, value, weight, active) in terms {
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite {name} loss {value}")));
        }
        if active {
            sum += weight * value;
        }
    }
    Ok(sum)
}

/// Per-element mean of `(eps_theta(q_sample(x0, t, noise), t, z) - noise)^2`.
pub fn diffusion_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &Tensor,
    steps: &[usize],
    noise: &Tensor,
    z_sem: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let batch = x0.dim(0)?;
    if steps.len() != batch || z_sem.dim(0)? != batch {
        return Err(Error::Shape(format!(
            "batch of {batch} images with {} steps and {} latents",
            steps.len(),
            z_sem.dim(0)?
        )));
    }
    let x_t = schedule.q_sample_batch(x0, steps, noise)?;
    let eps = model.predict_noise(&x_t, steps, z_sem)?;
    Ok((eps - noise.to_dtype(x0.dtype())?)?.sqr()?.mean_all()?)
}

fn normalized_rows(z: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let host: Vec<Vec<f64>> = z.to_dtype(candle_core::DType::F64)?.to_vec2()?;
    if let Some(i) = host.iter().position(|r| norm(r) == 0.0) {
        return Err(Error::ZeroNorm(format!("batch latent {i}")));
    }
    let norms = z.sqr()?.sum_keepdim(1)?.sqrt()?;
    let unit = z.broadcast_div(&norms)?;
    let sims = host
        .iter()
        .map(|a| {
            host.iter()
                .map(|b| crate::classifier::cosine_similarity(a, b))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((unit, sims))
}

fn mask_tensor(rows: Vec<Vec<f64>>, like: &Tensor) -> Result<Tensor> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Tensor::from_vec(flat, (n, n), like.device())?.to_dtype(like.dtype())?)
}

/// Row-wise `log(sum_j mask_ij exp(logits_ij))` with a detached per-row shift.
fn masked_log_sum_exp(logits: &Tensor, mask: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let e = logits.broadcast_sub(shift)?.exp()?.mul(mask)?;
    Ok(e.sum(1)?.maximum(LOG_FLOOR)?.log()?.add(&shift.squeeze(1)?)?)
}

fn row_shift(sims: &[Vec<f64>], mask: &[Vec<f64>], scale: f64, like: &Tensor) -> Result<Tensor> {
    let shifts: Vec<f64> = sims
        .iter()
        .zip(mask)
        .map(|(row, m)| {
            row.iter()
                .zip(m)
                .filter(|(_, &w)| w > 0.0)
                .map(|(s, _)| s * scale)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(Tensor::from_vec(shifts, (sims.len(), 1), like.device())?.to_dtype(like.dtype())?)
}

fn check_labels(z: &Tensor, labels: &[u8]) -> Result<usize> {
    let (batch, _) = z.dims2()?;
    if labels.len() != batch {
        return Err(Error::Shape(format!("{batch} latents for {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("non-binary label {l}")));
    }
    Ok(batch)
}

/// Differentiable form of [`contrastive_loss`] for a labelled batch `[B, d]`.
pub fn contrastive_loss_tensor(z: &Tensor, labels: &[u8], tau: f64) -> Result<Tensor> {
    let batch = check_labels(z, labels)?;
    for class in 0..2u8 {
        if labels.iter().filter(|&&l| l == class).count() < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive loss needs at least 2 latents of class {class}"
            )));
        }
    }
    let (unit, sims) = normalized_rows(z)?;
    let logits = (unit.matmul(&unit.t()?)? / tau)?;
    let same: Vec<Vec<f64>> = (0..batch)
        .map(|i| (0..batch).map(|j| (i != j && labels[i] == labels[j]) as u8 as f64).collect())
        .collect();
    let others: Vec<Vec<f64>> = (0..batch)
        .map(|i| (0..batch).map(|j| (i != j) as u8 as f64).collect())
        .collect();
    let shift = row_shift(&sims, &others, 1.0 / tau, z)?;
    let pos = masked_log_sum_exp(&logits, &mask_tensor(same, z)?, &shift)?;
    let all = masked_log_sum_exp(&logits, &mask_tensor(others, z)?, &shift)?;
    Ok((all - pos)?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct BatchPrediction {
    /// Mean cross-entropy of the soft neighbor vote.
    pub loss: Tensor,
    /// Hard mode vote per anchor.
    pub hard_labels: Vec<u8>,
}

/// Soft `K`-nearest-neighbor prediction loss within a batch, each anchor
/// excluded from its own neighbor set.
pub fn batch_prediction_loss(z: &Tensor, labels: &[u8], k: usize, tau_pred: f64) -> Result<BatchPrediction> {
    let batch = check_labels(z, labels)?;
    let (unit, sims) = normalized_rows(z)?;
    let mut selected = vec![vec![0.0f64; batch]; batch];
    let mut matching = vec![vec![0.0f64; batch]; batch];
    let mut hard_labels = Vec::with_capacity(batch);
    for i in 0..batch {
        let ids = top_k(&sims[i], k, Some(i))?;
        let ranked: Vec<u8> = ids.iter().map(|&j| labels[j]).collect();
        hard_labels.push(mode_label(&ranked));
        for j in ids {
            selected[i][j] = 1.0;
            if labels[j] == labels[i] {
                matching[i][j] = 1.0;
            }
        }
    }
    let logits = (unit.matmul(&unit.t()?)? / tau_pred)?;
    let shift = row_shift(&sims, &selected, 1.0 / tau_pred, z)?;
    // the floor applies to the probability, as in `prediction_loss`
    let e = logits.broadcast_sub(&shift)?.exp()?;
    let num = e.mul(&mask_tensor(matching, z)?)?.sum(1)?;
    let den = e.mul(&mask_tensor(selected, z)?)?.sum(1)?;
    let p = (num / den)?.maximum(LOG_FLOOR)?;
    Ok(BatchPrediction {
        loss: p.log()?.neg()?.mean_all()?,
        hard_labels,
    })
}
