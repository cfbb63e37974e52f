use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dcsst::config::ExperimentConfig;
use dcsst::data::{self, SynthConfig};
use dcsst::experiment::{run_experiment, RunOptions};

use crate::{check, Check};

const CONFIG: &str = "\
preset = micro
num_classes = 4
epochs = 5
warmup_epochs = 2
tau = 0.3
lr = 0.003
batch_size = 4
consistency = true
t_max = 10
seeds = 0,1
record_wall_time = false
";

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn differing(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<String> {
    let mut keys: Vec<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect()
}

pub fn run() -> Vec<Check> {
    let body = || -> dcsst::Result<Vec<Check>> {
        let dir = tempfile::tempdir().expect("temporary directory");
        let manifest = data::synth_generate(
            &SynthConfig {
                num_classes: 4,
                per_class: 16,
                image_size: 16,
                seed: 3,
                overlap: 0.0,
            },
            &dir.path().join("data"),
        )?;
        let split = data::stratified_split(&manifest, 0.75, 0.25, 3)?;
        let cfg = ExperimentConfig::from_text(CONFIG)?;
        let (a, b, r) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("resumed"));
        let first = run_experiment(&cfg, &manifest, &split, &a, &RunOptions::default())?;
        run_experiment(&cfg, &manifest, &split, &b, &RunOptions::default())?;
        let partial = run_experiment(
            &cfg,
            &manifest,
            &split,
            &r,
            &RunOptions {
                stop_after: Some(2),
                ..Default::default()
            },
        )?;
        let interrupted = partial.seeds.iter().all(|s| !s.completed && s.log.len() == 2);
        run_experiment(
            &cfg,
            &manifest,
            &split,
            &r,
            &RunOptions {
                resume: true,
                ..Default::default()
            },
        )?;
        let (sa, sb, sr) = (snapshot(&a), snapshot(&b), snapshot(&r));
        let expected = ["epochs.jsonl", "checkpoint.dcsm", "predictions.jsonl"];
        let complete = first.report.is_some()
            && sa.contains_key(Path::new("report.json"))
            && cfg
                .train
                .seeds
                .iter()
                .all(|s| expected.iter().all(|f| sa.contains_key(&Path::new(&format!("seed-{s}")).join(f))));
        let twice = differing(&sa, &sb);
        let resumed = differing(&sa, &sr);
        Ok(vec![
            check(
                "identical runs are byte-identical",
                complete && twice.is_empty(),
                format!("{} files compared (logs, checkpoints, predictions, reports); differing: {twice:?}", sa.len()),
            ),
            check(
                "interrupted and resumed run matches uninterrupted run",
                interrupted && resumed.is_empty(),
                format!("stopped after 2 of {} epochs, resumed; differing files: {resumed:?}", cfg.train.epochs),
            ),
        ])
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(body)) {
        Ok(Ok(checks)) => checks,
        Ok(Err(e)) => vec![("reproducibility".into(), Err(format!("error: {e}")))],
        Err(_) => vec![("reproducibility".into(), Err("panicked".into()))],
    }
}
