use dcsst::diffusion::{self, NoiseSchedule};
use dcsst::model::{Model, ModelConfig};
use dcsst::rng;
use dcsst::{Tape, Tensor};
use rand::Rng as _;

use crate::common::{moments, random_tensor};
use crate::{check, guard, Check};

const SAMPLES: usize = 10_000;

fn marginal_moments() -> dcsst::Result<Check> {
    let schedule = NoiseSchedule::default();
    let mut pick = rng::stream(5, "acceptance-diffusion-cases", 0);
    let mut lines = Vec::new();
    let mut ok = true;
    for case in 0..5u64 {
        let x0v: f64 = pick.random_range(-2.0..2.0);
        let t = pick.random_range(1..=schedule.steps());
        let x0 = Tensor::full([SAMPLES], x0v);
        let ab = schedule.alpha_bar(t);
        let (mean_th, var_th) = (ab.sqrt() * x0v, 1.0 - ab);
        let mean_tol = 3.0 * (var_th / SAMPLES as f64).sqrt();
        let var_tol = 3.0 * (2.0 / (SAMPLES as f64 - 1.0)).sqrt() * var_th;
        let chain = schedule.sample_chain(&x0, t, &mut rng::stream(5, "acceptance-chain", case))?;
        let closed = schedule.forward_diffuse(&x0, t, &mut rng::stream(5, "acceptance-closed", case))?;
        let (cm, cv) = moments(chain.data());
        let (fm, fv) = moments(closed.data());
        let case_ok = (cm - mean_th).abs() <= mean_tol
            && (fm - mean_th).abs() <= mean_tol
            && (cv - var_th).abs() <= var_tol
            && (fv - var_th).abs() <= var_tol
            && (cm - fm).abs() <= 2.0 * mean_tol
            && (cv - fv).abs() <= 2.0 * var_tol;
        ok &= case_ok;
        lines.push(format!(
            "t={t} x0={x0v:.2}: mean {mean_th:.4} chain {cm:.4} closed {fm:.4} (±{mean_tol:.4}), var {var_th:.4} chain {cv:.4} closed {fv:.4} (±{var_tol:.4})"
        ));
    }
    Ok(check("chain and closed-form marginals match theory", ok, lines.join("; ")))
}

fn noiseless_identity() -> dcsst::Result<Check> {
    let schedule = NoiseSchedule::noiseless(10);
    let mut r = rng::stream(5, "acceptance-noiseless", 0);
    let x = random_tensor(&mut r, &[3, 3, 8, 8]);
    let mut ok = true;
    for t in 1..=10 {
        ok &= schedule.forward_diffuse(&x, t, &mut r)? == x;
        ok &= schedule.sample_chain(&x, t, &mut r)? == x;
    }
    ok &= diffusion::noise_batch(&schedule, &x, 10, &mut r)? == x;
    Ok(check(
        "zero-noise schedule is the identity",
        ok,
        "forward_diffuse, sample_chain and noise_batch return the input bit-for-bit at every step".to_string(),
    ))
}

fn consistency_sanity() -> dcsst::Result<Check> {
    let model = Model::randomized(ModelConfig::micro(), 3, 0.3)?;
    let mut r = rng::stream(5, "acceptance-consistency", 0);
    let images = random_tensor(&mut r, &[4, 3, 16, 16]);
    let noiseless = NoiseSchedule::noiseless(10);
    let zero = {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let loss = diffusion::consistency_loss(&mut tape, &model, &p, &images, &noiseless, 10, &mut r)?;
        tape.value(loss).data()[0]
    };
    let mut min_kl = f64::INFINITY;
    let schedule = NoiseSchedule::default();
    for i in 0..10 {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let mut nr = rng::stream(5, "acceptance-consistency-noise", i);
        let loss = diffusion::consistency_loss(&mut tape, &model, &p, &images, &schedule, 50, &mut nr)?;
        min_kl = min_kl.min(tape.value(loss).data()[0]);
    }
    Ok(check(
        "consistency loss",
        zero == 0.0 && min_kl >= 0.0,
        format!("zero-noise loss {zero:e}; smallest KL over 10 noisy draws {min_kl:.3e}"),
    ))
}

pub fn run() -> Vec<Check> {
    vec![
        guard("marginals", marginal_moments),
        guard("noiseless", noiseless_identity),
        guard("consistency", consistency_sanity),
    ]
}
