use dcsst::data;
use dcsst::model::{Model, ModelConfig};
use dcsst::rng;
use dcsst::train::{
    self, generate_pseudo_labels, labeled_step, pseudo_batch_loss, select_pseudo_labels, train_step, SchedulerChoice,
    TrainConfig, TrainData, TrainState,
};
use dcsst::{Tape, Tensor};
use rand::Rng as _;

use crate::common::micro_train_data;
use crate::{check, guard, Check};

fn base_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        initial_lr: 3e-3,
        batch_size: 4,
        warmup_epochs: 2,
        tau: 0.3,
        scheduler: SchedulerChoice::Cosine,
        eval_batch_size: 16,
        record_wall_time: false,
        ..TrainConfig::default()
    }
}

fn fresh(cfg: &TrainConfig, seed: u64) -> dcsst::Result<TrainState> {
    Ok(TrainState::new(Model::new(ModelConfig::micro(), seed)?, cfg, seed))
}

/// Labeled pass of one epoch written out directly: shuffle, batch, step.
fn plain_labeled_pass(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, e: usize) -> dcsst::Result<()> {
    let lr = cfg.schedule().lr(e);
    let order = rng::permutation(&mut rng::stream(state.seed, "labeled-order", e as u64), data.labeled.len());
    for idx in order.chunks(cfg.batch_size) {
        let x = data::batch(idx.iter().map(|&i| &data.labeled[i].tensor))?;
        let y: Vec<usize> = idx.iter().map(|&i| data.labeled[i].label).collect();
        labeled_step(state, x, &y, lr)?;
    }
    Ok(())
}

fn same_params(a: &TrainState, b: &TrainState) -> bool {
    a.model.params == b.model.params && a.optimizer == b.optimizer
}

fn supervised_equivalence() -> dcsst::Result<Check> {
    let data = micro_train_data(4, 6, 1);
    let cfg = TrainConfig {
        tau: 1.0,
        ..base_cfg()
    };
    let mut trainer = fresh(&cfg, 3)?;
    let log = train::train(&mut trainer, &data, &cfg, |_, _| Ok(()))?;
    let mut plain = fresh(&cfg, 3)?;
    let mut identical_each_epoch = true;
    let mut replay = fresh(&cfg, 3)?;
    for e in 0..cfg.epochs {
        plain_labeled_pass(&mut plain, &data, &cfg, e)?;
        train::run_epoch(&mut replay, &data, &cfg)?;
        identical_each_epoch &= same_params(&plain, &replay);
    }
    let no_pseudo = log.iter().all(|r| r.pseudo_count == 0 && r.unlabeled_grad_samples == 0);
    Ok(check(
        "tau = 1 equals plain supervised loop",
        identical_each_epoch && same_params(&trainer, &plain) && no_pseudo,
        format!(
            "{} epochs, parameters and Adam moments bit-identical at every epoch: {identical_each_epoch}",
            cfg.epochs
        ),
    ))
}

fn strictness() -> dcsst::Result<Check> {
    let mut rng = rng::stream(4, "acceptance-strict", 0);
    let mut violations = 0;
    let mut accepted = 0;
    let mut boundary = 0;
    for _ in 0..500 {
        let (n, k) = (rng.random_range(1..=12), rng.random_range(2..=5));
        let tau: f64 = rng.random_range(0.5..0.99);
        let mut rows: Vec<f64> = Vec::with_capacity(n * k);
        for i in 0..n {
            let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            if i == 0 {
                // A row whose maximum is exactly tau must be rejected.
                row = vec![(1.0 - tau) / (k - 1) as f64; k];
                row[k - 1] = tau;
                boundary += 1;
            } else {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            rows.extend(row);
        }
        let ids: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let probs = Tensor::new([n, k], rows.clone())?;
        let set = select_pseudo_labels(&ids, &probs, tau);
        accepted += set.len();
        let mut kept = vec![false; n];
        for r in &set.records {
            kept[r.index] = true;
            let row = &rows[r.index * k..(r.index + 1) * k];
            let max = row.iter().copied().fold(f64::MIN, f64::max);
            if !(r.confidence > tau) || r.confidence != max || row[r.label] != max {
                violations += 1;
            }
        }
        for (i, &kept) in kept.iter().enumerate() {
            let max = rows[i * k..(i + 1) * k].iter().copied().fold(f64::MIN, f64::max);
            if !kept && max > tau {
                violations += 1;
            }
        }
    }
    // And on real model outputs.
    let data = micro_train_data(4, 8, 2);
    let state = fresh(&base_cfg(), 0)?;
    let set = generate_pseudo_labels(&state.model, &data.unlabeled, 0.26, 8)?;
    let model_ok = set.records.iter().all(|r| r.confidence > 0.26);
    Ok(check(
        "pseudo-label strictness (> tau)",
        violations == 0 && model_ok,
        format!("500 random probability tables, {accepted} accepted, {boundary} exact-tau rows rejected, {violations} violations; model outputs {} accepted", set.len()),
    ))
}

/// Runs one epoch by hand: regenerate from the current model, labeled pass,
/// then the pseudo pass at `weight`.
fn manual_epoch(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, weight: f64) -> dcsst::Result<usize> {
    let e = state.epoch;
    let lr = cfg.schedule().lr(e);
    let pseudo = if e >= cfg.warmup_epochs {
        generate_pseudo_labels(&state.model, &data.unlabeled, cfg.tau, cfg.eval_batch_size)?
    } else {
        Default::default()
    };
    plain_labeled_pass(state, data, cfg, e)?;
    if !pseudo.is_empty() {
        let order = rng::permutation(&mut rng::stream(state.seed, "pseudo-order", e as u64), pseudo.len());
        for idx in order.chunks(cfg.batch_size) {
            let recs: Vec<_> = idx.iter().map(|&i| &pseudo.records[i]).collect();
            let x = data::batch(recs.iter().map(|r| &data.unlabeled[r.index].tensor))?;
            let y: Vec<usize> = recs.iter().map(|r| r.label).collect();
            train_step(state, lr, |tape, model, p| {
                let xv = tape.constant(x);
                let logits = model.forward(tape, p, xv)?;
                let ce = tape.cross_entropy(logits, &y, None)?;
                tape.scale(ce, weight)
            })?;
        }
    }
    state.epoch += 1;
    Ok(pseudo.len())
}

fn regeneration() -> dcsst::Result<Check> {
    let data = micro_train_data(4, 8, 5);
    let cfg = base_cfg();
    let mut trainer = fresh(&cfg, 9)?;
    let mut manual = fresh(&cfg, 9)?;
    let mut counts = Vec::new();
    let mut matches = true;
    for _ in 0..cfg.epochs {
        let rec = train::run_epoch(&mut trainer, &data, &cfg)?;
        let n = manual_epoch(&mut manual, &data, &cfg, 0.8)?;
        matches &= rec.pseudo_count == n && same_params(&trainer, &manual);
        counts.push(n);
    }
    let used = counts.iter().skip(cfg.warmup_epochs).any(|&n| n > 0);
    Ok(check(
        "per-epoch regeneration and weighted pass",
        matches && used,
        format!("trainer matches a hand-written epoch loop bit-for-bit; pseudo-set sizes per epoch {counts:?}"),
    ))
}

fn weighting() -> dcsst::Result<Check> {
    let data = micro_train_data(2, 0, 6);
    let model = Model::randomized(ModelConfig::micro(), 1, 0.3)?;
    let x = data::batch(data.labeled.iter().map(|r| &r.tensor))?;
    let y: Vec<usize> = data.labeled.iter().map(|r| r.label).collect();
    let eval = |w: Option<f64>| -> dcsst::Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let logits = model.forward(&mut tape, &p, xv)?;
        let loss = match w {
            Some(w) => pseudo_batch_loss(&mut tape, logits, &y, w)?,
            None => tape.cross_entropy(logits, &y, None)?,
        };
        tape.backward(loss)?;
        Ok((tape.value(loss).data()[0], p.grads(&tape, &model.params)))
    };
    let (plain, g1) = eval(None)?;
    let (weighted, gw) = eval(Some(0.8))?;
    let (half, gh) = eval(Some(0.5))?;
    let value_exact = weighted == 0.8 * plain && half == 0.5 * plain;
    // Relative to each tensor's norm: summed contributions that cancel to an
    // exact zero in one run need not do so after scaling.
    let rel = |got: &Tensor, base: &Tensor, w: f64| -> f64 {
        let num: f64 = got.data().iter().zip(base.data()).map(|(g, b)| (g - w * b).powi(2)).sum();
        let den: f64 = base.data().iter().map(|b| (w * b).powi(2)).sum();
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    };
    let mut worst: f64 = 0.0;
    for ((a, b), c) in g1.iter().zip(&gw).zip(&gh) {
        worst = worst.max(rel(b, a, 0.8)).max(rel(c, a, 0.5));
    }
    Ok(check(
        "pseudo loss weighting is exactly linear",
        value_exact && worst < 1e-12,
        format!("loss(0.8) = 0.8 * CE bit-exact: {value_exact}; per-tensor gradient max rel dev {worst:.1e}"),
    ))
}

fn warmup_purity() -> dcsst::Result<Check> {
    let data = micro_train_data(4, 6, 7);
    let cfg = TrainConfig {
        consistency: true,
        tau: 0.26,
        ..base_cfg()
    };
    // Same labeled pool, completely different unlabeled pool.
    let mut other = data.clone();
    let mut r = rng::stream(7, "acceptance-swap", 0);
    for rec in &mut other.unlabeled {
        rec.tensor = Tensor::from_fn(rec.tensor.shape(), |_| rng::standard_normal(&mut r) * 3.0);
        rec.label = (rec.label + 1) % 4;
    }
    let mut a = fresh(&cfg, 2)?;
    let mut b = fresh(&cfg, 2)?;
    let mut counters = Vec::new();
    let mut identical_during_warmup = true;
    for e in 0..cfg.epochs {
        let rec = train::run_epoch(&mut a, &data, &cfg)?;
        train::run_epoch(&mut b, &other, &cfg)?;
        counters.push(rec.unlabeled_grad_samples);
        if e < cfg.warmup_epochs {
            identical_during_warmup &= same_params(&a, &b) && rec.unlabeled_grad_samples == 0;
        }
    }
    let diverged_after = !same_params(&a, &b);
    let active_after = counters[cfg.warmup_epochs..].iter().all(|&c| c > 0);
    Ok(check(
        "warmup purity",
        identical_during_warmup && diverged_after && active_after,
        format!(
            "unlabeled gradient samples per epoch {counters:?} (warmup {}); swapping the unlabeled pool changes nothing before warmup ends",
            cfg.warmup_epochs
        ),
    ))
}

pub fn run() -> Vec<Check> {
    vec![
        guard("supervised equivalence", supervised_equivalence),
        guard("strictness", strictness),
        guard("regeneration", regeneration),
        guard("weighting", weighting),
        guard("warmup purity", warmup_purity),
    ]
}
