//! Central finite-difference verification of tape gradients.
//!
//! The function under test may return any shape; it is reduced to a scalar
//! by a fixed pseudo-random projection `Σ out ⊙ R` so every output element
//! contributes. The reported error for an input is
//! `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂, 1e-7)`.

pub mod suite;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// When set, only this many evenly spaced coordinates per input are
    /// perturbed.
    pub max_coords_per_input: Option<usize>,
    /// Multiplies the analytic gradient; anything other than 1.0 simulates a
    /// broken backward rule.
    pub fault_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_coords_per_input: None,
            fault_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst relative error across inputs.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Checks `f` with respect to every tensor in `inputs`.
pub fn check<F>(name: &str, inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let mut r = rng::stream(0x5eed, "gradcheck-projection", 0);
        Tensor::from_fn(tape.shape(out), |_| r.random_range(-1.0..1.0))
    };
    let project = |tape: &mut Tape, out: Var| -> Result<Var> {
        let r = tape.constant(projection.clone());
        let prod = tape.mul(out, r)?;
        tape.sum(prod)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            let mut g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            g.data_mut().iter_mut().for_each(|x| *x *= opts.fault_scale);
            g
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = project(&mut tape, out)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for &c in &coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[c];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        coords_checked += coords.len();
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(1e-7);
        per_input.push(diff_sq.sqrt() / denom);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    if !max_rel_err.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        per_input,
        coords_checked,
        tolerance: opts.tolerance,
    })
}
