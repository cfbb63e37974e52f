use std::time::Instant;

use dcsst::config::ExperimentConfig;
use dcsst::data::{self, DatasetSplit, Manifest, NormStats, SynthConfig};
use dcsst::experiment::{run_experiment, ExperimentOutcome, RunOptions};
use dcsst::model::{Ablation, Model, ModelConfig};
use dcsst::predictor::argmax;
use dcsst::rng;
use dcsst::train::{labeled_step, TrainConfig, TrainState};
use dcsst::Tensor;

use crate::{check, guard, Check};

const CONFIG: &str = include_str!("../../../../configs/synthetic-tiny.conf");
const OVERFIT_EPOCHS: usize = 200;

/// Epoch at which full-batch training first classifies all 32 images.
fn overfit_epoch(seed: u64) -> dcsst::Result<Option<usize>> {
    let mut r = rng::stream(0, "overfit", 0);
    let images: Vec<Tensor> = (0..32).map(|i| data::synth_image(i % 4, 16, 0.0, &mut r)).collect();
    let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
    let stats = NormStats::compute(&[], images.iter())?;
    let normalized: Vec<Tensor> = images.iter().map(|t| stats.apply(t)).collect::<dcsst::Result<_>>()?;
    let x = data::batch(normalized.iter())?;
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(Model::new(ModelConfig::micro(), seed)?, &cfg, seed);
    for e in 0..OVERFIT_EPOCHS {
        labeled_step(&mut state, x.clone(), &labels, 1e-3)?;
        let probs = state.model.predict_proba(&x)?;
        let correct = probs.data().chunks(4).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
        if correct == labels.len() {
            return Ok(Some(e + 1));
        }
    }
    Ok(None)
}

fn overfit() -> dcsst::Result<Check> {
    let epochs: Vec<Option<usize>> = (0..4).map(overfit_epoch).collect::<dcsst::Result<_>>()?;
    Ok(check(
        "micro model memorises 32 images",
        epochs.iter().all(Option::is_some),
        format!("epochs to 100% train accuracy for seeds 0-3: {epochs:?} (limit {OVERFIT_EPOCHS})"),
    ))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn arm(cfg: &ExperimentConfig, manifest: &Manifest, split: &DatasetSplit, out: &std::path::Path, opts: RunOptions) -> dcsst::Result<ExperimentOutcome> {
    run_experiment(cfg, manifest, split, out, &opts)
}

fn seed_metric(o: &ExperimentOutcome, f: impl Fn(&dcsst::metrics::RunMetrics) -> f64) -> Vec<f64> {
    o.seeds.iter().filter_map(|s| s.test.as_ref()).map(|t| f(&t.metrics)).collect()
}

fn three_arms() -> Vec<Check> {
    let run = || -> dcsst::Result<Vec<Check>> {
        let started = Instant::now();
        let dir = tempfile::tempdir().expect("temporary directory");
        let manifest = data::synth_generate(
            &SynthConfig {
                num_classes: 4,
                per_class: 100,
                image_size: 64,
                seed: 0,
                overlap: 0.0,
            },
            &dir.path().join("data"),
        )?;
        let split = data::stratified_split(&manifest, 0.8, 0.05, 0)?;
        let cfg = ExperimentConfig::from_text(CONFIG)?;
        let full = arm(&cfg, &manifest, &split, &dir.path().join("full"), RunOptions::default())?;
        let supervised = arm(
            &cfg,
            &manifest,
            &split,
            &dir.path().join("supervised"),
            RunOptions {
                supervised_only: true,
                ..Default::default()
            },
        )?;
        let baseline = arm(
            &cfg,
            &manifest,
            &split,
            &dir.path().join("baseline"),
            RunOptions {
                ablation: Some(Ablation::Baseline),
                ..Default::default()
            },
        )?;

        let bal_full = seed_metric(&full, |m| m.balanced_accuracy);
        let bal_sup = seed_metric(&supervised, |m| m.balanced_accuracy);
        let precisions: Vec<f64> = full
            .seeds
            .iter()
            .map(|s| s.log.last().and_then(|r| r.pseudo_precision).unwrap_or(0.0))
            .collect();
        let (mf, ms) = (mean(bal_full.iter().copied()), mean(bal_sup.iter().copied()));
        let mp = mean(precisions.iter().copied());
        let min_p = precisions.iter().copied().fold(f64::INFINITY, f64::min);
        let auc_full = seed_metric(&full, |m| m.auc_roc);
        let auc_base = seed_metric(&baseline, |m| m.auc_roc);
        let (af, ab) = (mean(auc_full.iter().copied()), mean(auc_base.iter().copied()));
        let elapsed = started.elapsed().as_secs_f64();
        let n = cfg.train.seeds.len();
        Ok(vec![
            check(
                "pseudo-labels do not hurt and are precise",
                bal_full.len() == n && bal_sup.len() == n && mf >= ms - 0.02 && mp > 0.90,
                format!(
                    "balanced accuracy full {mf:.4} vs supervised {ms:.4} over {n} seeds; final pseudo precision mean {mp:.4} (min {min_p:.4})"
                ),
            ),
            check(
                "mechanisms do not hurt AUC",
                auc_full.len() == n && auc_base.len() == n && af >= ab - 0.02,
                format!("AUC full {af:.4} vs baseline {ab:.4} (gap {:+.4})", af - ab),
            ),
            check(
                "desk-scale wall time",
                elapsed < 1800.0,
                format!("three arms x {n} seeds in {elapsed:.0}s (limit 1800s)"),
            ),
        ])
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)) {
        Ok(Ok(checks)) => checks,
        Ok(Err(e)) => vec![("three-arm comparison".into(), Err(format!("error: {e}")))],
        Err(_) => vec![("three-arm comparison".into(), Err("panicked".into()))],
    }
}

pub fn run() -> Vec<Check> {
    let mut out = vec![guard("overfit", overfit)];
    out.extend(three_arms());
    out
}
