//! Deterministic DDIM decoding and its inversion, both conditioned on the
//! semantic latent.
//!
//! A transfer between noise levels `from -> to` predicts the clean image
//! `x0 = (x - sqrt(1 - a_from) eps) / sqrt(a_from)` and re-noises it with the
//! same noise estimate: `sqrt(a_to) x0 + sqrt(1 - a_to) eps`. Decoding walks the
//! plan downwards, inversion walks it upwards. Nothing in this module consumes
//! randomness and intermediate states are never clamped.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::network::NoisePredictor;
use crate::schedule::{check_same_shape, NoiseSchedule};

/// Terminal latent `x_T` obtained by deterministic inversion.
#[derive(Debug, Clone)]
pub struct StochasticSubcode(pub Tensor);

/// Step indices `0 = t_0 < t_1 < ... < t_S = T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerPlan {
    steps: Vec<usize>,
}

impl SamplerPlan {
    /// `S` substeps with uniform stride, `t_i = round(i T / S)`.
    pub fn uniform(total_steps: usize, substeps: usize) -> Result<Self> {
        if substeps == 0 || substeps > total_steps {
            return Err(Error::Plan(format!(
                "substeps must be in [1, {total_steps}], got {substeps}"
            )));
        }
        let steps = (0..=substeps)
            .map(|i| ((i * total_steps) as f64 / substeps as f64).round() as usize)
            .collect();
        Self::new(steps, total_steps)
    }

    /// Accepts an ascending sequence starting at 0 and ending at `total_steps`.
    pub fn new(steps: Vec<usize>, total_steps: usize) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::Plan("a plan needs at least two step indices".into()));
        }
        if steps[0] != 0 || *steps.last().unwrap() != total_steps {
            return Err(Error::Plan(format!(
                "plan must run from 0 to {total_steps}, got {:?}..{:?}",
                steps.first(),
                steps.last()
            )));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Plan("step indices must be strictly increasing".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn substeps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn total_steps(&self) -> usize {
        *self.steps.last().unwrap()
    }

    fn check(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.total_steps() != schedule.steps() {
            return Err(Error::Plan(format!(
                "plan ends at {} but the schedule has {} steps",
                self.total_steps(),
                schedule.steps()
            )));
        }
        Ok(())
    }
}

/// Clean-image estimate `(x_t - sqrt(1 - a_t) eps) / sqrt(a_t)`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, eps_hat)?;
    let a = schedule.alpha(t)?;
    let eps = eps_hat.to_dtype(x_t.dtype())?;
    Ok((x_t - eps.affine((1.0 - a).sqrt(), 0.0)?)?.affine(1.0 / a.sqrt(), 0.0)?)
}

fn transfer(x: &Tensor, from: usize, to: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let x0 = predict_x0(x, from, eps_hat, schedule)?;
    let a_to = schedule.alpha(to)?;
    let eps = eps_hat.to_dtype(x.dtype())?;
    Ok((x0.affine(a_to.sqrt(), 0.0)? + eps.affine((1.0 - a_to).sqrt(), 0.0)?)?)
}

/// One generative step `t -> t_prev` (`t > t_prev >= 0`).
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Plan(format!("t_prev {t_prev} must be below t {t}")));
    }
    transfer(x_t, t, t_prev, eps_hat, schedule)
}

/// One inversion step `t -> t_next` (`t_next > t`).
pub fn ddim_invert_step(
    x_t: &Tensor,
    t: usize,
    t_next: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t_next <= t {
        return Err(Error::Plan(format!("t_next {t_next} must be above t {t}")));
    }
    transfer(x_t, t, t_next, eps_hat, schedule)
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// Output clamped to `[0, 1]` for display.
    pub image: Tensor,
    /// Unclamped output of the last step.
    pub raw: Tensor,
}

/// Runs the conditioned generative process from `x_T` down the plan.
pub fn decode<P: NoisePredictor + ?Sized>(
    model: &P,
    z_sem: &Tensor,
    x_t: &StochasticSubcode,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
) -> Result<Decoded> {
    plan.check(schedule)?;
    let batch = x_t.0.dim(0)?;
    let mut x = x_t.0.detach();
    for w in plan.steps().windows(2).rev() {
        let (t_prev, t) = (w[0], w[1]);
        let eps = model.predict_noise(&x, &vec![t; batch], z_sem)?.detach();
        x = ddim_step(&x, t, t_prev, &eps, schedule)?.detach();
    }
    Ok(Decoded {
        image: x.clamp(0.0, 1.0)?,
        raw: x,
    })
}

/// Deterministic inversion of a clean image to its stochastic subcode.
///
/// The noise estimate for the clean image itself (`t = 0`) is taken at step 1,
/// the lowest step the denoiser is trained on.
pub fn encode_stochastic<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &Tensor,
    z_sem: &Tensor,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
) -> Result<StochasticSubcode> {
    plan.check(schedule)?;
    let batch = x0.dim(0)?;
    let mut x = x0.detach();
    for w in plan.steps().windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let eps = model.predict_noise(&x, &vec![t.max(1); batch], z_sem)?.detach();
        x = ddim_invert_step(&x, t, t_next, &eps, schedule)?.detach();
    }
    Ok(StochasticSubcode(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use std::cell::Cell;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.05).unwrap()
    }

    fn tensor(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, 1, 1, v.len()), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, x: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
            Ok(x.zeros_like()?)
        }
    }

    /// Returns a fixed noise tensor and counts calls.
    struct Fixed(Tensor, Cell<usize>);
    impl NoisePredictor for Fixed {
        fn predict_noise(&self, _: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
            self.1.set(self.1.get() + 1);
            Ok(self.0.clone())
        }
    }

    #[test]
    fn uniform_plan() {
        let p = SamplerPlan::uniform(200, 20).unwrap();
        assert_eq!(p.substeps(), 20);
        assert_eq!(p.steps()[..3], [0, 10, 20]);
        assert_eq!(*p.steps().last().unwrap(), 200);
        let full = SamplerPlan::uniform(7, 7).unwrap();
        assert_eq!(full.steps(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        let odd = SamplerPlan::uniform(10, 3).unwrap();
        assert_eq!(odd.steps(), &[0, 3, 7, 10]);
        assert!(SamplerPlan::uniform(10, 0).is_err());
        assert!(SamplerPlan::uniform(10, 11).is_err());
        assert!(SamplerPlan::new(vec![0, 5, 5, 10], 10).is_err());
        assert!(SamplerPlan::new(vec![1, 5, 10], 10).is_err());
        assert!(SamplerPlan::new(vec![0, 5, 9], 10).is_err());
    }

    #[test]
    fn zero_eps_step_scales() {
        let s = schedule();
        let x = tensor(&[0.3, -1.2, 2.0]);
        let out = values(&ddim_step(&x, 60, 25, &x.zeros_like().unwrap(), &s).unwrap());
        let c = (s.alpha(25).unwrap() / s.alpha(60).unwrap()).sqrt();
        for (o, v) in out.iter().zip([0.3, -1.2, 2.0]) {
            assert!((o - c * v).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_noise_recovers_the_forward_marginal() {
        let s = schedule();
        let x0 = tensor(&[0.1, 0.5, 0.9, 0.0]);
        let eps = tensor(&[0.7, -1.1, 0.2, 2.3]);
        let x_t = s.q_sample(&x0, 80, &eps).unwrap();
        let out = values(&ddim_step(&x_t, 80, 30, &eps, &s).unwrap());
        let expected = values(&s.q_sample(&x0, 30, &eps).unwrap());
        for (o, e) in out.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12);
        }
        let clean = values(&ddim_step(&x_t, 80, 0, &eps, &s).unwrap());
        for (o, e) in clean.iter().zip([0.1, 0.5, 0.9, 0.0]) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn step_order_is_checked() {
        let s = schedule();
        let x = tensor(&[1.0]);
        assert!(ddim_step(&x, 10, 10, &x, &s).is_err());
        assert!(ddim_step(&x, 10, 20, &x, &s).is_err());
        assert!(ddim_invert_step(&x, 10, 5, &x, &s).is_err());
        assert!(ddim_step(&x, 10, 5, &tensor(&[1.0, 2.0]), &s).is_err());
    }

    #[test]
    fn zero_predictor_inversion_telescopes() {
        let s = schedule();
        let plan = SamplerPlan::uniform(100, 10).unwrap();
        let x0 = tensor(&[0.2, 0.4, 0.8]);
        let z = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let x_t = encode_stochastic(&Zero, &x0, &z, &plan, &s).unwrap();
        let c = s.alpha(100).unwrap().sqrt();
        for (o, v) in values(&x_t.0).iter().zip([0.2, 0.4, 0.8]) {
            assert!((o - c * v).abs() < 1e-12);
        }
        let back = decode(&Zero, &z, &x_t, &plan, &s).unwrap();
        for (o, v) in values(&back.raw).iter().zip([0.2, 0.4, 0.8]) {
            assert!((o - v).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_noise_round_trip_is_exact() {
        let s = schedule();
        let plan = SamplerPlan::uniform(100, 7).unwrap();
        let eps = tensor(&[0.5, -0.3, 1.7]);
        let model = Fixed(eps.clone(), Cell::new(0));
        let x0 = tensor(&[0.25, 0.75, 0.5]);
        let z = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let x_t = encode_stochastic(&model, &x0, &z, &plan, &s).unwrap();
        let expected = values(&s.q_sample(&x0, 100, &eps).unwrap());
        for (o, e) in values(&x_t.0).iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12);
        }
        let out = decode(&model, &z, &x_t, &plan, &s).unwrap();
        for (o, e) in values(&out.raw).iter().zip([0.25, 0.75, 0.5]) {
            assert!((o - e).abs() < 1e-12);
        }
        assert_eq!(model.1.get(), 14);
    }

    #[test]
    fn decode_clamps_only_the_presented_image() {
        let s = schedule();
        let plan = SamplerPlan::uniform(100, 4).unwrap();
        let x = tensor(&[3.0, -2.0, 0.05]);
        let z = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let out = decode(&Zero, &z, &StochasticSubcode(x), &plan, &s).unwrap();
        let raw = values(&out.raw);
        let shown = values(&out.image);
        assert!(raw[0] > 1.0 && raw[1] < 0.0);
        assert_eq!(shown[0], 1.0);
        assert_eq!(shown[1], 0.0);
        assert!((shown[2] - raw[2]).abs() < 1e-15);
    }

    #[test]
    fn plan_must_match_schedule() {
        let s = schedule();
        let plan = SamplerPlan::uniform(50, 5).unwrap();
        let x = tensor(&[1.0]);
        let z = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(decode(&Zero, &z, &StochasticSubcode(x.clone()), &plan, &s).is_err());
        assert!(encode_stochastic(&Zero, &x, &z, &plan, &s).is_err());
    }
}
