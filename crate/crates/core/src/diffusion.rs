//! Forward diffusion noising and the prediction-consistency regularizer.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::Model;
use crate::nn::Bound;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_T_MAX: usize = 10;

/// `betas[t-1] = β_t`, `alpha_bars[t] = Π_{s ≤ t} (1 − β_s)` with
/// `alpha_bars[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Zero betas are accepted so a noiseless schedule can be expressed;
    /// any positive beta must strictly shrink ᾱ.
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for (t, a) in alphas.iter().enumerate() {
            let next = alpha_bars[t] * a;
            let ok = if betas[t] > 0.0 { next < alpha_bars[t] } else { next == alpha_bars[t] };
            if !ok {
                return Err(Error::Config(format!("alpha_bar not decreasing at step {}", t + 1)));
            }
            alpha_bars.push(next);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Betas spaced linearly from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 || start <= 0.0 || end >= 1.0 || start > end {
            return Err(Error::Config(format!(
                "invalid linear schedule: {steps} steps, {start}..{end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::new(betas)
    }

    pub fn noiseless(steps: usize) -> Self {
        Self::new(vec![0.0; steps.max(1)]).expect("zero schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                op: "diffusion step",
                index: t,
                bound: self.steps() + 1,
            });
        }
        Ok(())
    }

    /// Closed-form marginal sample `√ᾱ_t x0 + √(1−ᾱ_t) ε`.
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x0.clone();
        for v in out.data_mut() {
            *v = a * *v + s * rng::standard_normal(rng);
        }
        Ok(out)
    }

    /// `t` sequential Gaussian steps `x_s = √α_s x_{s−1} + √β_s ε`.
    pub fn sample_chain(&self, x0: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check_step(t)?;
        let mut x = x0.clone();
        for step in 1..=t {
            let (a, s) = (self.alpha(step).sqrt(), self.beta(step).sqrt());
            for v in x.data_mut() {
                *v = a * *v + s * rng::standard_normal(rng);
            }
        }
        Ok(x)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

/// Noises every image of a `[B, ...]` batch at its own step drawn uniformly
/// from `1..=t_max`.
pub fn noise_batch(schedule: &NoiseSchedule, images: &Tensor, t_max: usize, rng: &mut Rng) -> Result<Tensor> {
    if t_max == 0 || t_max > schedule.steps() {
        return Err(Error::Config(format!(
            "t_max {t_max} outside 1..={}",
            schedule.steps()
        )));
    }
    let b = images.shape()[0];
    let per = images.numel() / b;
    let mut out = Vec::with_capacity(images.numel());
    for i in 0..b {
        let t = rng.random_range(1..=t_max);
        let x0 = Tensor::new([per], images.data()[i * per..(i + 1) * per].to_vec())?;
        out.extend(schedule.forward_diffuse(&x0, t, rng)?.into_data());
    }
    Tensor::new(images.shape(), out)
}

/// `mean_i KL(p_clean,i ‖ p_noisy,i)` where the clean distribution is a
/// constant target and `noisy_logits: [B, K]` lives on the tape.
pub fn kl_to_target(tape: &mut Tape, clean_logits: &Tensor, noisy_logits: Var) -> Result<Var> {
    if clean_logits.shape() != tape.shape(noisy_logits) {
        return Err(Error::dim("consistency_loss", clean_logits.shape(), tape.shape(noisy_logits)));
    }
    let b = clean_logits.shape()[0];
    let lp = kernels::log_softmax_axis(clean_logits.data(), clean_logits.shape(), 1);
    let p = kernels::softmax_axis(clean_logits.data(), clean_logits.shape(), 1);
    let lp = tape.constant(Tensor::new(clean_logits.shape(), lp)?);
    let p = tape.constant(Tensor::new(clean_logits.shape(), p)?);
    let lq = tape.log_softmax(noisy_logits, 1)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Consistency between predictions on clean images (fixed target) and on
/// their forward-diffused copies (differentiable through `p`).
pub fn consistency_loss(
    tape: &mut Tape,
    model: &Model,
    p: &Bound,
    images: &Tensor,
    schedule: &NoiseSchedule,
    t_max: usize,
    rng: &mut Rng,
) -> Result<Var> {
    let clean = model.logits(images)?;
    let noisy = noise_batch(schedule, images, t_max, rng)?;
    let x = tape.constant(noisy);
    let logits = model.forward(tape, p, x)?;
    kl_to_target(tape, &clean, logits)
}
