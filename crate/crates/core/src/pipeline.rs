//! End-to-end experiment plumbing shared by the command line and tests:
//! load a split, normalize with labeled-train statistics, train one seed,
//! and score the test pool.

use crate::data::{self, DatasetSplit, ImageRecord, Manifest, NormStats};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, RunMetrics};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{self, EpochRecord, TrainConfig, TrainData, TrainState};

/// Decoded pools of one split, normalized with labeled-train statistics.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub classes: Vec<String>,
    pub train: TrainData,
    pub test: Vec<ImageRecord>,
    pub norm: NormStats,
}

pub fn prepare(manifest: &Manifest, split: &DatasetSplit, image_size: usize) -> Result<PreparedData> {
    let mut labeled = data::load_images(manifest, &split.labeled, image_size)?;
    let mut unlabeled = data::load_images(manifest, &split.unlabeled, image_size)?;
    let mut test = data::load_images(manifest, &split.test, image_size)?;
    if labeled.is_empty() {
        return Err(Error::Config("split has no labeled samples".into()));
    }
    let norm = data::pool_stats(&labeled)?;
    for pool in [&mut labeled, &mut unlabeled, &mut test] {
        data::normalize_all(pool, &norm)?;
    }
    Ok(PreparedData {
        classes: manifest.classes.clone(),
        train: TrainData {
            labeled,
            unlabeled,
            unlabeled_truth: true,
        },
        test,
        norm,
    })
}

/// Probabilities, metrics and confusion matrix of a model on a pool.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub probs: Tensor,
    pub truth: Vec<usize>,
    pub metrics: RunMetrics,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(model: &Model, records: &[ImageRecord], batch_size: usize, seed: u64) -> Result<Evaluation> {
    let probs = train::predict(model, records, batch_size)?;
    let truth: Vec<usize> = records.iter().map(|r| r.label).collect();
    let (metrics, confusion) = RunMetrics::compute(seed, probs.data(), &truth, model.cfg.num_classes)?;
    Ok(Evaluation {
        probs,
        truth,
        metrics,
        confusion,
    })
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
    pub test: Option<Evaluation>,
}

/// Trains one seed from `state` (fresh or resumed) to completion and
/// evaluates on the test pool when it is non-empty.
pub fn run_from<F>(state: TrainState, prepared: &PreparedData, cfg: &TrainConfig, on_epoch: F) -> Result<SeedOutcome>
where
    F: FnMut(&TrainState, &EpochRecord) -> Result<()>,
{
    let mut state = state;
    let log = train::train(&mut state, &prepared.train, cfg, on_epoch)?;
    let test = if prepared.test.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &prepared.test, cfg.eval_batch_size, state.seed)?)
    };
    Ok(SeedOutcome { state, log, test })
}

pub fn fresh_state(model_cfg: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<TrainState> {
    Ok(TrainState::new(Model::new(model_cfg.clone(), seed)?, cfg, seed))
}

pub fn run_seed(prepared: &PreparedData, model_cfg: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<SeedOutcome> {
    if model_cfg.num_classes != prepared.classes.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the data has {}",
            model_cfg.num_classes,
            prepared.classes.len()
        )));
    }
    run_from(fresh_state(model_cfg, cfg, seed)?, prepared, cfg, |_, _| Ok(()))
}
