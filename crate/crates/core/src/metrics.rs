//! Classification metrics and multi-run aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Contract("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::dim("confusion_matrix", &[truth.len()], &[pred.len()]));
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Index {
                    op: "confusion_matrix",
                    index: t.max(p),
                    bound: num_classes,
                });
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        self.counts[t].iter().sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        self.counts.iter().map(|r| r[p]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut out = String::from("truth\\pred");
        for p in 0..self.num_classes() {
            let _ = write!(out, ",{}", name(p));
        }
        out.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            out.push_str(&name(t));
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of per-class recalls.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let c = cm.num_classes();
    let mut sum = 0.0;
    for t in 0..c {
        let n = cm.row_sum(t);
        if n == 0 {
            return Err(Error::Undefined(format!("balanced accuracy: class {t} has no samples")));
        }
        sum += cm.get(t, t) as f64 / n as f64;
    }
    Ok(sum / c as f64)
}

/// F1 of one class as `2TP / (2TP + FP + FN)`; zero when the denominator is zero.
pub fn f1_class(cm: &ConfusionMatrix, class: usize) -> f64 {
    let tp = cm.get(class, class);
    let fp = cm.col_sum(class) - tp;
    let fn_ = cm.row_sum(class) - tp;
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        log::warn!("F1 undefined for class {class} (no true or predicted samples); using 0");
        return 0.0;
    }
    2.0 * tp as f64 / denom as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Mode {
    Positive(usize),
    Macro,
}

impl F1Mode {
    /// Positive class 1 for binary tasks, macro averaging otherwise.
    pub fn for_classes(num_classes: usize) -> Self {
        if num_classes == 2 {
            F1Mode::Positive(1)
        } else {
            F1Mode::Macro
        }
    }
}

pub fn f1(cm: &ConfusionMatrix, mode: F1Mode) -> f64 {
    match mode {
        F1Mode::Positive(k) => f1_class(cm, k),
        F1Mode::Macro => {
            let c = cm.num_classes();
            (0..c).map(|k| f1_class(cm, k)).sum::<f64>() / c as f64
        }
    }
}

/// `(p_o − p_e) / (1 − p_e)`.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Undefined("kappa of an empty confusion matrix".into()));
    }
    let n = n as f64;
    let po = cm.trace() as f64 / n;
    let pe = (0..cm.num_classes())
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    if pe == 1.0 {
        return Err(Error::Undefined("kappa with chance agreement 1".into()));
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::dim("auc", &[scores.len()], &[positive.len()]));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Binary AUC on the positive-class score for two classes; otherwise the
/// macro mean of one-vs-rest AUCs over classes present in `truth`.
/// `probs` is row-major `[N, C]`.
pub fn auc_roc(probs: &[f64], truth: &[usize], num_classes: usize) -> Result<f64> {
    if probs.len() != truth.len() * num_classes {
        return Err(Error::dim("auc_roc", &[probs.len()], &[truth.len(), num_classes]));
    }
    let column = |k: usize| -> Vec<f64> { probs.chunks_exact(num_classes).map(|r| r[k]).collect() };
    if num_classes == 2 {
        let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        return binary_auc(&column(1), &pos);
    }
    let mut sum = 0.0;
    let mut used = 0;
    for k in 0..num_classes {
        let pos: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        let n_pos = pos.iter().filter(|&&p| p).count();
        if n_pos == 0 {
            log::warn!("class {k} absent from truth; skipped in macro AUC");
            continue;
        }
        if n_pos == pos.len() {
            return Err(Error::Undefined("AUC with a single class in truth".into()));
        }
        sum += binary_auc(&column(k), &pos)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Undefined("AUC with no evaluable class".into()));
    }
    Ok(sum / used as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub auc_roc: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub cohens_kappa: f64,
}

impl RunMetrics {
    pub fn compute(seed: u64, probs: &[f64], truth: &[usize], num_classes: usize) -> Result<(Self, ConfusionMatrix)> {
        let pred: Vec<usize> = probs
            .chunks_exact(num_classes)
            .map(crate::predictor::argmax)
            .collect();
        let cm = ConfusionMatrix::from_predictions(truth, &pred, num_classes)?;
        let m = Self {
            seed,
            auc_roc: auc_roc(probs, truth, num_classes)?,
            balanced_accuracy: balanced_accuracy(&cm)?,
            f1: f1(&cm, F1Mode::for_classes(num_classes)),
            cohens_kappa: cohens_kappa(&cm)?,
        };
        Ok((m, cm))
    }

    fn values(&self) -> [f64; 4] {
        [self.auc_roc, self.balanced_accuracy, self.f1, self.cohens_kappa]
    }
}

pub const METRIC_NAMES: [&str; 4] = ["auc_roc", "balanced_accuracy", "f1", "cohens_kappa"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        });
        Self { mean, std }
    }

    pub fn render(&self) -> String {
        match self.std {
            Some(s) => format!("{:.4} ± {:.4}", self.mean, s),
            None => format!("{:.4}", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    pub auc_roc: Summary,
    pub balanced_accuracy: Summary,
    pub f1: Summary,
    pub cohens_kappa: Summary,
}

impl MetricsReport {
    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }

    pub fn summaries(&self) -> [(&'static str, &Summary); 4] {
        [
            (METRIC_NAMES[0], &self.auc_roc),
            (METRIC_NAMES[1], &self.balanced_accuracy),
            (METRIC_NAMES[2], &self.f1),
            (METRIC_NAMES[3], &self.cohens_kappa),
        ]
    }

    /// Plain-text table with one `m ± s` cell per metric.
    pub fn render_table(&self, label: &str) -> String {
        let mut out = format!("{:<12}", "arm");
        for name in METRIC_NAMES {
            let _ = write!(out, " | {name:<18}");
        }
        out.push('\n');
        let _ = write!(out, "{label:<12}");
        for (_, s) in self.summaries() {
            let _ = write!(out, " | {:<18}", s.render());
        }
        out.push('\n');
        out
    }
}

pub fn aggregate_runs(runs: Vec<RunMetrics>) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::Contract("aggregate of zero runs".into()));
    }
    let column = |k: usize| -> Summary { Summary::of(&runs.iter().map(|r| r.values()[k]).collect::<Vec<_>>()) };
    Ok(MetricsReport {
        auc_roc: column(0),
        balanced_accuracy: column(1),
        f1: column(2),
        cohens_kappa: column(3),
        runs,
    })
}
