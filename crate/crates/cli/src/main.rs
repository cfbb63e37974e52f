//! `dcsst`: synthesize data, split, train, evaluate and gradient-check.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments, 3 a
//! verification (gradient check) failed. Set `DCSST_LOG=debug` for more
//! output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dcsst::checkpoint::Checkpoint;
use dcsst::config::ExperimentConfig;
use dcsst::data::{self, DatasetSplit, Manifest, SynthConfig};
use dcsst::experiment::{run_experiment, RunOptions};
use dcsst::gradcheck::suite::{self, DEFAULT_CASES, MODULES, OPS};
use dcsst::gradcheck::{GradCheckOptions, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use dcsst::model::Ablation;
use dcsst::pipeline;
use serde::Serialize;

const EXIT_RUNTIME: u8 = 1;
const EXIT_VERIFICATION: u8 = 3;

#[derive(Parser)]
#[command(name = "dcsst", version, about = "Dynamic cross-scale windowed transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic class-textured image set and its manifest.
    SynthData(SynthArgs),
    /// Stratified labeled / unlabeled / test split of a manifest.
    Split(SplitArgs),
    /// Train every seed of a config and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a set of manifest ids.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..=4))]
    classes: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    per_class: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(4..=4096))]
    size: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class-parameter jitter in [0, 1]; 0 gives perfectly separable classes.
    #[arg(long, default_value_t = 0.0)]
    overlap: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Manifest file, or a directory holding `manifest.json` or class folders.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.05)]
    labeled_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Manifest; defaults to the one recorded in the split file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Train on labeled data only (tau = 1).
    #[arg(long)]
    supervised_only: bool,
    /// Continue from the checkpoints in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("which").required(true).args(["ids", "split"]))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// File with one manifest id per line.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Split file; evaluates `--pool` of it.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "test", requires = "split")]
    pool: String,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// JSON report; the confusion matrix goes next to it as `.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("target").args(["op", "module", "model"]))]
struct GradcheckArgs {
    /// One primitive operation, e.g. `softmax`.
    #[arg(long)]
    op: Option<String>,
    /// One composite module, e.g. `window_attention`.
    #[arg(long)]
    module: Option<String>,
    /// End-to-end model check; only `micro` is supported.
    #[arg(long, value_parser = ["micro"])]
    model: Option<String>,
    /// Random shapes per operation.
    #[arg(long, default_value_t = DEFAULT_CASES)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Scales every analytic gradient by 1.001 to prove the harness catches
    /// a wrong backward rule.
    #[arg(long, hide = true)]
    inject_fault: bool,
    /// List the checkable operation and module names.
    #[arg(long)]
    list: bool,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DCSST_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Command::Split(a) => split(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => gradcheck(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(EXIT_RUNTIME)
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_classes: a.classes as usize,
        per_class: a.per_class as usize,
        image_size: a.size as usize,
        seed: a.seed,
        overlap: a.overlap,
    };
    let manifest = data::synth_generate(&cfg, &a.out)?;
    println!(
        "{} images in {} classes -> {}",
        manifest.records.len(),
        manifest.num_classes(),
        a.out.join(data::MANIFEST_FILE).display()
    );
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    if path.is_dir() {
        let file = path.join(data::MANIFEST_FILE);
        if file.exists() {
            return Ok(Manifest::read(&file)?);
        }
        return Ok(data::load_manifest(path)?);
    }
    Ok(Manifest::read(path)?)
}

fn split(a: SplitArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let mut split = data::stratified_split(&manifest, a.train_frac, a.labeled_frac, a.seed)?;
    split.manifest = Some(fs::canonicalize(&a.manifest).unwrap_or(a.manifest.clone()).display().to_string());
    split.write(&a.out)?;
    print!("{}", split.render_audit());
    println!("split written to {}", a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::read(&a.config)?;
    let split = DatasetSplit::read(&a.split)?;
    let manifest_path = match (&a.manifest, &split.manifest) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("{} names no manifest; pass --manifest", a.split.display()),
    };
    let manifest = read_manifest(&manifest_path)?;
    let opts = RunOptions {
        ablation: a.ablation,
        supervised_only: a.supervised_only,
        resume: a.resume,
        stop_after: a.stop_after,
        notes: vec![
            format!("config: {}", a.config.display()),
            format!("split: {}", a.split.display()),
            format!("manifest: {}", manifest_path.display()),
        ],
    };
    let outcome = run_experiment(&cfg, &manifest, &split, &a.out, &opts)?;
    match &outcome.report {
        Some(report) => print!("{}", report.render_table(&opts.label(&outcome.config))),
        None => {
            let done = outcome.seeds.iter().filter(|s| s.completed).count();
            println!(
                "stopped with {done} of {} seeds complete; rerun with --resume to continue",
                outcome.seeds.len()
            );
        }
    }
    println!("run directory: {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    classes: &'a [String],
    samples: usize,
    metrics: &'a dcsst::metrics::RunMetrics,
    confusion: &'a [Vec<u64>],
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = read_manifest(&a.manifest)?;
    if ck.model.cfg.num_classes != manifest.num_classes()
        || (!ck.meta.classes.is_empty() && ck.meta.classes != manifest.classes)
    {
        bail!(
            "checkpoint was trained on classes {:?} but the manifest has {:?}",
            ck.meta.classes,
            manifest.classes
        );
    }
    let ids: Vec<String> = match (&a.ids, &a.split) {
        (Some(path), _) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        (None, Some(path)) => DatasetSplit::read(path)?.pool(&a.pool)?.to_vec(),
        (None, None) => unreachable!("clap requires --ids or --split"),
    };
    if ids.is_empty() {
        bail!("no ids to evaluate");
    }
    let mut records = data::load_images(&manifest, &ids, ck.model.cfg.image_size)?;
    match &ck.meta.norm {
        Some(norm) => data::normalize_all(&mut records, norm)?,
        None => log::warn!("checkpoint carries no normalization statistics; using raw pixels"),
    }
    let eval = pipeline::evaluate(&ck.model, &records, a.batch_size.max(1), ck.meta.seed)?;
    let report = EvalReport {
        checkpoint: a.checkpoint.display().to_string(),
        classes: &manifest.classes,
        samples: records.len(),
        metrics: &eval.metrics,
        confusion: eval.confusion.counts(),
    };
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", a.out.display()))?;
    let csv = a.out.with_extension("csv");
    fs::write(&csv, eval.confusion.to_csv(&manifest.classes)).with_context(|| format!("writing {}", csv.display()))?;
    let m = &eval.metrics;
    println!(
        "{} samples: auc {:.4}  bal-acc {:.4}  f1 {:.4}  kappa {:.4}",
        records.len(),
        m.auc_roc,
        m.balanced_accuracy,
        m.f1,
        m.cohens_kappa
    );
    println!("report: {}  confusion: {}", a.out.display(), csv.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.list {
        println!("ops: {}", OPS.join(" "));
        println!("modules: {}", MODULES.join(" "));
        return Ok(ExitCode::SUCCESS);
    }
    let opts = GradCheckOptions {
        step: DEFAULT_STEP,
        tolerance: a.tolerance,
        fault_scale: if a.inject_fault { 1.001 } else { 1.0 },
        ..Default::default()
    };
    let reports: Vec<GradCheckReport> = if let Some(op) = &a.op {
        vec![suite::check_op(op, a.cases, a.seed, &opts)?]
    } else if let Some(module) = &a.module {
        vec![suite::check_module(module, a.seed, &opts)?]
    } else if a.model.is_some() {
        vec![suite::check_module("model", a.seed, &opts)?]
    } else {
        suite::run_all(a.seed, a.cases, &opts)?
    };
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{verdict:<5}{:<20} max rel err {:.3e}  ({} coords)",
            r.name, r.max_rel_err, r.coords_checked
        );
    }
    println!("{} of {} checks passed (tolerance {:e})", reports.len() - failed, reports.len(), a.tolerance);
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFICATION)
    })
}
