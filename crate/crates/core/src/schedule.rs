//! Noise schedule and closed-form forward noising.
//!
//! Steps are 1-based: `alpha(t) = prod_{s=1..t} (1 - beta_s)` for `t` in `1..=T`,
//! with `alpha(0) = 1` so deterministic sampling can land on the clean image.
//! All schedule arithmetic is carried out in `f64`; coefficients are cast to
//! the tensor dtype only when they are applied.

use candle_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("number of steps must be at least 1".into()));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::Schedule(format!(
                "non-finite endpoints ({beta_start}, {beta_end})"
            )));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta sequence".into()));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b > 0.0 && **b < 1.0))
        {
            return Err(Error::Schedule(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let alphas = betas
            .iter()
            .scan(1.0f64, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products for `t = 1..=T` (index `t - 1`).
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product at step `t` in `0..=T`, with `alpha(0) = 1`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alphas[t - 1] })
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `sqrt(alpha_t) * x0 + sqrt(1 - alpha_t) * noise` for a single step `t` in `1..=T`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(t, 1)?;
        check_same_shape(x0, noise)?;
        let a = self.alphas[t - 1];
        let signal = x0.affine(a.sqrt(), 0.0)?;
        let noise = noise.to_dtype(x0.dtype())?.affine((1.0 - a).sqrt(), 0.0)?;
        Ok((signal + noise)?)
    }

    /// Batched forward noising with one step per leading-axis element.
    pub fn q_sample_batch(&self, x0: &Tensor, steps: &[usize], noise: &Tensor) -> Result<Tensor> {
        check_same_shape(x0, noise)?;
        let batch = x0.dim(0)?;
        if steps.len() != batch {
            return Err(Error::Shape(format!(
                "{} steps for a batch of {batch}",
                steps.len()
            )));
        }
        let mut signal = Vec::with_capacity(batch);
        let mut sigma = Vec::with_capacity(batch);
        for &t in steps {
            self.check_step(t, 1)?;
            let a = self.alphas[t - 1];
            signal.push(a.sqrt());
            sigma.push((1.0 - a).sqrt());
        }
        let mut coeff_shape = vec![batch];
        coeff_shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
        let coeff = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, coeff_shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?)
        };
        let signal = x0.broadcast_mul(&coeff(signal)?)?;
        let noise = noise.to_dtype(x0.dtype())?.broadcast_mul(&coeff(sigma)?)?;
        Ok((signal + noise)?)
    }
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}
