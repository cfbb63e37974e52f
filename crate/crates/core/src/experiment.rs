//! Multi-seed training runs with on-disk artifacts.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.conf              resolved model + training config (replayable)
//! report.json           per-seed metrics and mean ± std
//! report.txt            the same as a one-row table
//! seed-<s>/epochs.jsonl one JSON record per epoch
//! seed-<s>/checkpoint.dcsm
//! seed-<s>/predictions.jsonl  {id, truth, probs} per test image
//! seed-<s>/confusion.csv
//! ```
//!
//! With `resume`, a seed whose directory holds a checkpoint continues from
//! it; its epoch log is truncated to the checkpoint's epoch first.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{DatasetSplit, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, MetricsReport, RunMetrics};
use crate::model::Ablation;
use crate::pipeline::{self, Evaluation, PreparedData};
use crate::train::{self, EpochRecord, TrainState};

pub const RUN_CONFIG_FILE: &str = "run.conf";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.dcsm";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const CONFUSION_FILE: &str = "confusion.csv";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the config's mechanism switches when set.
    pub ablation: Option<Ablation>,
    /// Sets τ = 1 so no pseudo-label ever qualifies.
    pub supervised_only: bool,
    pub resume: bool,
    /// Stop every seed after this many epochs in this invocation, leaving a
    /// resumable run (used to exercise interruption).
    pub stop_after: Option<usize>,
    /// Free-form provenance lines written as comments into `run.conf`.
    pub notes: Vec<String>,
}

impl RunOptions {
    /// Arm name of the resolved configuration, e.g. `full` or `baseline+supervised`.
    pub fn label(&self, resolved: &ExperimentConfig) -> String {
        let mut s = Ablation::of(&resolved.model).as_str().to_string();
        if resolved.train.tau >= 1.0 {
            s += "+supervised";
        }
        s
    }

    /// The configuration actually trained: ablation and τ override applied.
    pub fn resolve(&self, cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        if let Some(a) = self.ablation {
            a.apply(&mut out.model);
        }
        if self.supervised_only {
            out.train.tau = 1.0;
        }
        out.model.validate()?;
        out.train.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub truth: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub label: String,
    pub classes: Vec<String>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    /// Every epoch of the run, including epochs replayed from a resumed log.
    pub log: Vec<EpochRecord>,
    /// `None` when the invocation stopped early.
    pub test: Option<Evaluation>,
    pub completed: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    /// Present when every seed completed and the test pool is non-empty.
    pub report: Option<MetricsReport>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn render_log(log: &[EpochRecord]) -> String {
    log.iter().map(EpochRecord::to_json_line).collect()
}

pub fn prediction_lines(prepared: &PreparedData, eval: &Evaluation) -> String {
    let k = eval.probs.shape()[1];
    prepared
        .test
        .iter()
        .zip(eval.probs.data().chunks_exact(k))
        .map(|(r, p)| {
            let line = PredictionLine {
                id: r.id.clone(),
                truth: r.label,
                probs: p.to_vec(),
            };
            serde_json::to_string(&line).expect("prediction serializes") + "\n"
        })
        .collect()
}

pub fn write_report(out: &Path, label: &str, classes: &[String], report: &MetricsReport) -> Result<()> {
    let file = ReportFile {
        label: label.to_string(),
        classes: classes.to_vec(),
        report: report.clone(),
    };
    write_file(&out.join(REPORT_JSON), (serde_json::to_string_pretty(&file)? + "\n").as_bytes())?;
    let mut text = report.render_table(label);
    text.push('\n');
    for r in &report.runs {
        text += &format!(
            "seed {:<4} auc {:.4}  bal-acc {:.4}  f1 {:.4}  kappa {:.4}\n",
            r.seed, r.auc_roc, r.balanced_accuracy, r.f1, r.cohens_kappa
        );
    }
    write_file(&out.join(REPORT_TEXT), text.as_bytes())
}

fn run_config_text(cfg: &ExperimentConfig, opts: &RunOptions) -> String {
    let mut text = format!("# arm: {}\n", opts.label(cfg));
    for n in &opts.notes {
        text += &format!("# {n}\n");
    }
    text + &cfg.to_text()
}

/// Trains every seed of `cfg` (after applying `opts`) on `split` and writes
/// the run directory `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    split: &DatasetSplit,
    out: &Path,
    opts: &RunOptions,
) -> Result<ExperimentOutcome> {
    let cfg = opts.resolve(cfg)?;
    if cfg.model.num_classes != manifest.num_classes() {
        return Err(Error::Config(format!(
            "config has {} classes but the manifest has {}",
            cfg.model.num_classes,
            manifest.num_classes()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(RUN_CONFIG_FILE);
    let config_text = run_config_text(&cfg, opts);
    if opts.resume && config_path.exists() {
        let saved = ExperimentConfig::read(&config_path)?;
        if saved != cfg {
            return Err(Error::Config(format!(
                "{} differs from the requested configuration; refusing to resume",
                config_path.display()
            )));
        }
    } else {
        write_file(&config_path, config_text.as_bytes())?;
    }

    let prepared = pipeline::prepare(manifest, split, cfg.model.image_size)?;
    let mut seeds = Vec::with_capacity(cfg.train.seeds.len());
    for &seed in &cfg.train.seeds {
        seeds.push(run_one_seed(&cfg, &prepared, out, opts, seed)?);
    }

    let all_done = seeds.iter().all(|s| s.completed && s.test.is_some());
    let report = if all_done {
        let runs: Vec<RunMetrics> = seeds.iter().filter_map(|s| s.test.as_ref().map(|t| t.metrics.clone())).collect();
        let report = aggregate_runs(runs)?;
        write_report(out, &opts.label(&cfg), &prepared.classes, &report)?;
        Some(report)
    } else {
        None
    };
    Ok(ExperimentOutcome { config: cfg, seeds, report })
}

fn run_one_seed(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    out: &Path,
    opts: &RunOptions,
    seed: u64,
) -> Result<SeedResult> {
    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log_path = dir.join(EPOCH_LOG);
    let ckpt_path = dir.join(CHECKPOINT_FILE);

    let (state, mut log) = if opts.resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.model.cfg != cfg.model || ck.meta.seed != seed {
            return Err(Error::Config(format!(
                "{} was written for a different model or seed",
                ckpt_path.display()
            )));
        }
        let state = ck.into_state(&cfg.train)?;
        let mut log = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
        log.retain(|r| r.epoch < state.epoch);
        if log.len() != state.epoch {
            return Err(Error::Config(format!(
                "{} has {} epochs but the checkpoint is at epoch {}",
                log_path.display(),
                log.len(),
                state.epoch
            )));
        }
        log::info!("seed {seed}: resuming at epoch {}", state.epoch);
        (state, log)
    } else {
        (pipeline::fresh_state(&cfg.model, &cfg.train, seed)?, Vec::new())
    };
    write_file(&log_path, render_log(&log).as_bytes())?;

    let epochs = cfg.train.epochs;
    let every = cfg.train.checkpoint_every;
    let stop_at = opts.stop_after.map(|n| (state.epoch + n).min(epochs)).unwrap_or(epochs);
    let norm = Some(prepared.norm.clone());
    let save = |st: &TrainState| Checkpoint::from_state(st, norm.clone(), prepared.classes.clone()).save(&ckpt_path);
    if state.epoch == 0 {
        save(&state)?;
    }

    let mut state = state;
    {
        let mut log_file = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        while state.epoch < stop_at {
            let rec = train::run_epoch(&mut state, &prepared.train, &cfg.train)?;
            log_file
                .write_all(rec.to_json_line().as_bytes())
                .map_err(|e| Error::io(&log_path, e))?;
            let done = state.epoch;
            if done == epochs || done == stop_at || (every > 0 && done % every == 0) {
                save(&state)?;
            }
            log::info!(
                "seed {seed} epoch {}: labeled {:.4} pseudo {} ({})",
                rec.epoch,
                rec.labeled_loss,
                rec.pseudo_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
                rec.pseudo_count
            );
            log.push(rec);
        }
    }

    let completed = state.epoch >= epochs;
    let test = if completed && !prepared.test.is_empty() {
        let eval = pipeline::evaluate(&state.model, &prepared.test, cfg.train.eval_batch_size, seed)?;
        write_file(&dir.join(PREDICTIONS_FILE), prediction_lines(prepared, &eval).as_bytes())?;
        write_file(&dir.join(CONFUSION_FILE), eval.confusion.to_csv(&prepared.classes).as_bytes())?;
        Some(eval)
    } else {
        None
    };
    Ok(SeedResult {
        seed,
        log,
        test,
        completed,
    })
}
