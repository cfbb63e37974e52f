//! Semi-supervised training: labeled warmup, per-epoch confidence-filtered
//! pseudo-labels with a down-weighted loss, optional noise-consistency
//! regularization, and per-epoch learning-rate scheduling.
//!
//! Each epoch `e` (0-based) runs, in order:
//!
//! 1. if `e ≥ warmup_epochs`: regenerate pseudo-labels from the current
//!    model on clean unlabeled images;
//! 2. a shuffled mini-batch pass over the labeled pool;
//! 3. if the pseudo set is non-empty: a shuffled pass over it with loss
//!    `pseudo_weight · CE`;
//! 4. if consistency is enabled and `e ≥ warmup_epochs`: a pass over the
//!    unlabeled pool with the consistency loss;
//! 5. the next epoch uses `schedule.lr(e + 1)`.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, epoch)`,
//! so a run resumed at an epoch boundary replays the uninterrupted run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{join, parse_bool, parse_list, parse_value};
use crate::data::{self, ImageRecord};
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Bound;
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::predictor::argmax;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerChoice {
    Cosine,
    Step,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub pseudo_weight: f64,
    pub warmup_epochs: usize,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub scheduler: SchedulerChoice,
    pub min_lr_factor: f64,
    pub step_size: usize,
    pub step_gamma: f64,
    pub consistency: bool,
    pub consistency_weight: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_max: usize,
    /// Forward-diffuse pseudo-labeled images before the weighted pass.
    pub augment_pseudo: bool,
    pub seeds: Vec<u64>,
    pub eval_batch_size: usize,
    pub checkpoint_every: usize,
    /// When false, `wall_ms` is logged as 0 so logs are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            initial_lr: 1e-4,
            batch_size: 16,
            tau: 0.9,
            pseudo_weight: 0.8,
            warmup_epochs: 2,
            optimizer: OptimizerChoice::Adam,
            momentum: 0.9,
            scheduler: SchedulerChoice::Cosine,
            min_lr_factor: 0.01,
            step_size: 10,
            step_gamma: 0.5,
            consistency: false,
            consistency_weight: 0.1,
            diffusion_steps: diffusion::DEFAULT_STEPS,
            beta_start: diffusion::DEFAULT_BETA_START,
            beta_end: diffusion::DEFAULT_BETA_END,
            t_max: diffusion::DEFAULT_T_MAX,
            augment_pseudo: false,
            seeds: vec![0, 1, 2, 3],
            eval_batch_size: 64,
            checkpoint_every: 1,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs, batch_size and eval_batch_size must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.pseudo_weight > 0.0 && self.pseudo_weight <= 1.0) {
            return bad(format!("pseudo_weight {} outside (0, 1]", self.pseudo_weight));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.initial_lr > 0.0) || !(self.min_lr_factor > 0.0 && self.min_lr_factor <= 1.0) {
            return bad("lr must be positive and min_lr_factor in (0, 1]".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.t_max == 0 || self.t_max > self.diffusion_steps {
            return bad(format!("t_max {} outside 1..={}", self.t_max, self.diffusion_steps));
        }
        self.noise_schedule()?;
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(),
            OptimizerChoice::Sgd => OptimizerKind::Sgd { momentum: self.momentum },
        }
    }

    pub fn schedule(&self) -> Schedule {
        match self.scheduler {
            SchedulerChoice::Cosine => Schedule::Cosine {
                initial: self.initial_lr,
                min_factor: self.min_lr_factor,
                epochs: self.epochs,
            },
            SchedulerChoice::Step => Schedule::Step {
                initial: self.initial_lr,
                step: self.step_size,
                gamma: self.step_gamma,
            },
            SchedulerChoice::Constant => Schedule::Constant { lr: self.initial_lr },
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    /// Applies one key; returns `false` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr" => self.initial_lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "pseudo_weight" => self.pseudo_weight = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerChoice::Adam,
                    "sgd" => OptimizerChoice::Sgd,
                    _ => return Err(Error::Config(format!("optimizer: unknown kind {value:?}"))),
                }
            }
            "momentum" => self.momentum = parse_value(key, value)?,
            "scheduler" => {
                self.scheduler = match value {
                    "cosine" => SchedulerChoice::Cosine,
                    "step" => SchedulerChoice::Step,
                    "constant" => SchedulerChoice::Constant,
                    _ => return Err(Error::Config(format!("scheduler: unknown kind {value:?}"))),
                }
            }
            "min_lr_factor" => self.min_lr_factor = parse_value(key, value)?,
            "step_size" => self.step_size = parse_value(key, value)?,
            "step_gamma" => self.step_gamma = parse_value(key, value)?,
            "consistency" => self.consistency = parse_bool(key, value)?,
            "consistency_weight" => self.consistency_weight = parse_value(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse_value(key, value)?,
            "beta_start" => self.beta_start = parse_value(key, value)?,
            "beta_end" => self.beta_end = parse_value(key, value)?,
            "t_max" => self.t_max = parse_value(key, value)?,
            "augment_pseudo" => self.augment_pseudo = parse_bool(key, value)?,
            "seed" => {
                let first: u64 = parse_value(key, value)?;
                let n = self.seeds.len().max(1) as u64;
                self.seeds = (first..first + n).collect();
            }
            "num_runs" => {
                let n: u64 = parse_value(key, value)?;
                let first = self.seeds.first().copied().unwrap_or(0);
                self.seeds = (first..first + n).collect();
            }
            "seeds" => self.seeds = parse_list(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "record_wall_time" => self.record_wall_time = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let optimizer = match self.optimizer {
            OptimizerChoice::Adam => "adam",
            OptimizerChoice::Sgd => "sgd",
        };
        let scheduler = match self.scheduler {
            SchedulerChoice::Cosine => "cosine",
            SchedulerChoice::Step => "step",
            SchedulerChoice::Constant => "constant",
        };
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", self.initial_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("tau", self.tau.to_string()),
            ("pseudo_weight", self.pseudo_weight.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("optimizer", optimizer.to_string()),
            ("momentum", self.momentum.to_string()),
            ("scheduler", scheduler.to_string()),
            ("min_lr_factor", self.min_lr_factor.to_string()),
            ("step_size", self.step_size.to_string()),
            ("step_gamma", self.step_gamma.to_string()),
            ("consistency", self.consistency.to_string()),
            ("consistency_weight", self.consistency_weight.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("t_max", self.t_max.to_string()),
            ("augment_pseudo", self.augment_pseudo.to_string()),
            ("seeds", join(&self.seeds)),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("record_wall_time", self.record_wall_time.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    /// Position in the unlabeled pool.
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub records: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fraction of labels matching `truth[index]`.
    pub fn precision(&self, truth: &[usize]) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let hits = self.records.iter().filter(|r| truth[r.index] == r.label).count();
        Some(hits as f64 / self.len() as f64)
    }
}

/// Keeps rows of `probs: [N, K]` whose maximum strictly exceeds `tau`.
pub fn select_pseudo_labels(ids: &[String], probs: &Tensor, tau: f64) -> PseudoLabelSet {
    let k = probs.shape()[1];
    let records = probs
        .data()
        .chunks_exact(k)
        .enumerate()
        .filter_map(|(i, row)| {
            let label = argmax(row);
            (row[label] > tau).then(|| PseudoLabel {
                id: ids[i].clone(),
                index: i,
                label,
                confidence: row[label],
            })
        })
        .collect();
    PseudoLabelSet { records }
}

/// Class probabilities for every record, in order, from clean images.
pub fn predict(model: &Model, records: &[ImageRecord], batch_size: usize) -> Result<Tensor> {
    let k = model.cfg.num_classes;
    let mut out = Vec::with_capacity(records.len() * k);
    for chunk in records.chunks(batch_size.max(1)) {
        let x = data::batch(chunk.iter().map(|r| &r.tensor))?;
        out.extend(model.predict_proba(&x)?.into_data());
    }
    if records.is_empty() {
        return Err(Error::Config("prediction over an empty pool".into()));
    }
    Tensor::new([records.len(), k], out)
}

pub fn generate_pseudo_labels(model: &Model, unlabeled: &[ImageRecord], tau: f64, batch_size: usize) -> Result<PseudoLabelSet> {
    if unlabeled.is_empty() {
        return Ok(PseudoLabelSet::default());
    }
    let probs = predict(model, unlabeled, batch_size)?;
    let ids: Vec<String> = unlabeled.iter().map(|r| r.id.clone()).collect();
    Ok(select_pseudo_labels(&ids, &probs, tau))
}

/// `weight · CE(logits, labels)` for one pseudo-labeled batch.
pub fn pseudo_batch_loss(tape: &mut Tape, logits: Var, labels: &[usize], weight: f64) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels, None)?;
    tape.scale(ce, weight)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub labeled_loss: f64,
    pub pseudo_loss: Option<f64>,
    pub pseudo_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_loss: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
    /// Unlabeled samples that contributed to any gradient this epoch.
    pub unlabeled_grad_samples: usize,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serializes") + "\n"
    }
}

/// Labeled and unlabeled pools, already resized and normalized.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: Vec<ImageRecord>,
    pub unlabeled: Vec<ImageRecord>,
    /// Whether unlabeled records carry trustworthy ground truth, used only
    /// to report pseudo-label precision.
    pub unlabeled_truth: bool,
}

/// Everything needed to continue training at an epoch boundary.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    /// Next epoch to run.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig, seed: u64) -> Self {
        let optimizer = Optimizer::new(cfg.optimizer_kind(), &model.params);
        Self {
            model,
            optimizer,
            epoch: 0,
            seed,
        }
    }
}

/// One optimizer step on `loss_fn`'s scalar output; returns the loss value.
pub fn train_step<F>(state: &mut TrainState, lr: f64, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Model, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = state.model.params.bind(&mut tape, true);
    let loss = loss_fn(&mut tape, &state.model, &p)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    let grads = p.grads(&tape, &state.model.params);
    drop(tape);
    state.optimizer.step(state.model.params.tensors_mut(), &grads, lr)?;
    Ok(value)
}

/// Supervised cross-entropy step on a labeled batch.
pub fn labeled_step(state: &mut TrainState, images: Tensor, labels: &[usize], lr: f64) -> Result<f64> {
    train_step(state, lr, |tape, model, p| {
        let x = tape.constant(images);
        let logits = model.forward(tape, p, x)?;
        tape.cross_entropy(logits, labels, None)
    })
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

pub fn run_epoch(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig) -> Result<EpochRecord> {
    if data.labeled.is_empty() {
        return Err(Error::Config("labeled pool is empty".into()));
    }
    let started = Instant::now();
    let e = state.epoch;
    let seed = state.seed;
    let lr = cfg.schedule().lr(e);
    let past_warmup = e >= cfg.warmup_epochs;

    let pseudo = if past_warmup {
        generate_pseudo_labels(&state.model, &data.unlabeled, cfg.tau, cfg.eval_batch_size)?
    } else {
        PseudoLabelSet::default()
    };

    let order = rng::permutation(&mut rng::stream(seed, "labeled-order", e as u64), data.labeled.len());
    let mut labeled_sum = 0.0;
    for idx in batches(&order, cfg.batch_size) {
        let x = data::batch(idx.iter().map(|&i| &data.labeled[i].tensor))?;
        let y: Vec<usize> = idx.iter().map(|&i| data.labeled[i].label).collect();
        labeled_sum += labeled_step(state, x, &y, lr)? * idx.len() as f64;
    }

    let mut unlabeled_grad_samples = 0;
    let noise = cfg.noise_schedule()?;
    let pseudo_loss = if pseudo.is_empty() {
        None
    } else {
        let order = rng::permutation(&mut rng::stream(seed, "pseudo-order", e as u64), pseudo.len());
        let mut noise_rng = rng::stream(seed, "pseudo-noise", e as u64);
        let mut sum = 0.0;
        for idx in batches(&order, cfg.batch_size) {
            let recs: Vec<&PseudoLabel> = idx.iter().map(|&i| &pseudo.records[i]).collect();
            let mut x = data::batch(recs.iter().map(|r| &data.unlabeled[r.index].tensor))?;
            if cfg.augment_pseudo {
                x = diffusion::noise_batch(&noise, &x, cfg.t_max, &mut noise_rng)?;
            }
            let y: Vec<usize> = recs.iter().map(|r| r.label).collect();
            let w = cfg.pseudo_weight;
            let v = train_step(state, lr, |tape, model, p| {
                let xv = tape.constant(x);
                let logits = model.forward(tape, p, xv)?;
                pseudo_batch_loss(tape, logits, &y, w)
            })?;
            sum += v * idx.len() as f64;
            unlabeled_grad_samples += idx.len();
        }
        Some(sum / pseudo.len() as f64)
    };

    let consistency_loss = if cfg.consistency && past_warmup && !data.unlabeled.is_empty() {
        let order = rng::permutation(&mut rng::stream(seed, "consistency-order", e as u64), data.unlabeled.len());
        let mut noise_rng = rng::stream(seed, "consistency-noise", e as u64);
        let mut sum = 0.0;
        for idx in batches(&order, cfg.batch_size) {
            let x = data::batch(idx.iter().map(|&i| &data.unlabeled[i].tensor))?;
            let w = cfg.consistency_weight;
            let v = train_step(state, lr, |tape, model, p| {
                let l = diffusion::consistency_loss(tape, model, p, &x, &noise, cfg.t_max, &mut noise_rng)?;
                tape.scale(l, w)
            })?;
            sum += v * idx.len() as f64;
            unlabeled_grad_samples += idx.len();
        }
        Some(sum / data.unlabeled.len() as f64)
    } else {
        None
    };

    let pseudo_precision = if data.unlabeled_truth {
        let truth: Vec<usize> = data.unlabeled.iter().map(|r| r.label).collect();
        pseudo.precision(&truth)
    } else {
        None
    };
    state.epoch += 1;
    Ok(EpochRecord {
        epoch: e,
        labeled_loss: labeled_sum / data.labeled.len() as f64,
        pseudo_loss,
        pseudo_count: pseudo.len(),
        pseudo_precision,
        consistency_loss,
        lr,
        wall_ms: if cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
        unlabeled_grad_samples,
    })
}

/// Runs epochs from `state.epoch` to `cfg.epochs`, calling `on_epoch`
/// after each one.
pub fn train<F>(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, mut on_epoch: F) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&TrainState, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let rec = run_epoch(state, data, cfg)?;
        log::info!(
            "seed {} epoch {}: labeled {:.4} pseudo {} ({}) lr {:.3e}",
            state.seed,
            rec.epoch,
            rec.labeled_loss,
            rec.pseudo_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
            rec.pseudo_count,
            rec.lr
        );
        on_epoch(state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}
