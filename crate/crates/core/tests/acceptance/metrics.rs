use dcsst::metrics::{
    aggregate_runs, auc_roc, balanced_accuracy, binary_auc, cohens_kappa, f1, ConfusionMatrix, F1Mode, RunMetrics,
};
use dcsst::rng;
use rand::Rng as _;

use crate::common::{brute_balanced_accuracy, brute_f1, brute_kappa, expand, pairwise_auc, pairwise_auc_multi, random_counts};
use crate::{check, guard, Check};

const MATRICES: usize = 1000;
const SCORE_SETS: usize = 200;
const TOL: f64 = 1e-12;

fn confusion_oracle() -> dcsst::Result<Check> {
    let mut rng = rng::stream(2, "acceptance-cm", 0);
    let mut worst: f64 = 0.0;
    let mut mismatches = Vec::new();
    let mut undefined = 0;
    for i in 0..MATRICES {
        let k = rng.random_range(2..=4);
        let counts = random_counts(&mut rng, k, if i % 10 == 0 { 3 } else { 50 });
        let cm = ConfusionMatrix::from_counts(counts.clone())?;
        let samples = expand(&counts);
        let mut compare = |what: &str, got: Option<f64>, want: Option<f64>| match (got, want) {
            (Some(g), Some(w)) => {
                worst = worst.max((g - w).abs());
                if (g - w).abs() > TOL {
                    mismatches.push(format!("#{i} {what}: {g} vs {w}"));
                }
            }
            (None, None) => undefined += 1,
            (g, w) => mismatches.push(format!("#{i} {what}: defined {} vs {}", g.is_some(), w.is_some())),
        };
        compare("balanced accuracy", balanced_accuracy(&cm).ok(), brute_balanced_accuracy(&samples, k));
        compare("f1", Some(f1(&cm, F1Mode::for_classes(k))), Some(brute_f1(&samples, k)));
        compare("kappa", cohens_kappa(&cm).ok(), brute_kappa(&samples, k));
    }
    Ok(check(
        "balanced accuracy / F1 / kappa vs brute force",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{MATRICES} matrices, max |diff| {worst:.1e}, {undefined} undefined cases agree")
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    ))
}

fn auc_oracle() -> dcsst::Result<Check> {
    let mut rng = rng::stream(2, "acceptance-auc", 0);
    let mut bad = Vec::new();
    let mut ties = 0;
    for i in 0..SCORE_SETS {
        let k = if i % 2 == 0 { 2 } else { rng.random_range(3..=4) };
        let n = rng.random_range(k + 1..=30);
        let mut truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        truth[0] = 0;
        truth[1] = 1;
        // Coarse scores so ties are frequent.
        let probs: Vec<f64> = (0..n * k).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let got = auc_roc(&probs, &truth, k)?;
        let want = pairwise_auc_multi(&probs, &truth, k).expect("both classes present");
        if got != want {
            bad.push(format!("#{i}: {got} vs {want}"));
        }
        let col: Vec<f64> = probs.chunks_exact(k).map(|r| r[0]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == 0).collect();
        if binary_auc(&col, &pos)? != pairwise_auc(&col, &pos).unwrap() {
            bad.push(format!("#{i}: binary column 0"));
        }
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        ties += sorted.windows(2).filter(|w| w[0] == w[1]).count();
    }
    Ok(check(
        "AUC vs exhaustive pairs (exact)",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{SCORE_SETS} score sets bit-identical, {ties} tied score pairs exercised")
        } else {
            format!("{} mismatches, first {}", bad.len(), bad[0])
        },
    ))
}

fn relabel_invariance() -> dcsst::Result<Check> {
    let mut rng = rng::stream(2, "acceptance-relabel", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(3..=4);
        let counts = random_counts(&mut rng, k, 30);
        let perm = rng::permutation(&mut rng, k);
        let mut permuted = vec![vec![0; k]; k];
        for t in 0..k {
            for p in 0..k {
                permuted[perm[t]][perm[p]] = counts[t][p];
            }
        }
        let a = ConfusionMatrix::from_counts(counts)?;
        let b = ConfusionMatrix::from_counts(permuted)?;
        if let (Ok(x), Ok(y)) = (balanced_accuracy(&a), balanced_accuracy(&b)) {
            worst = worst.max((x - y).abs());
        }
        worst = worst.max((f1(&a, F1Mode::Macro) - f1(&b, F1Mode::Macro)).abs());
        if let (Ok(x), Ok(y)) = (cohens_kappa(&a), cohens_kappa(&b)) {
            worst = worst.max((x - y).abs());
        }
        // Scores move with their class column.
        let n = rng.random_range(k + 1..=30);
        let mut truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        truth[..k].iter_mut().enumerate().for_each(|(c, t)| *t = c);
        let probs: Vec<f64> = (0..n * k).map(|_| rng.random_range(0..6) as f64 / 6.0).collect();
        let mut moved = vec![0.0; n * k];
        for i in 0..n {
            for c in 0..k {
                moved[i * k + perm[c]] = probs[i * k + c];
            }
        }
        let relabeled: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        worst = worst.max((auc_roc(&probs, &truth, k)? - auc_roc(&moved, &relabeled, k)?).abs());
    }
    Ok(check(
        "class relabelling invariance",
        worst <= TOL,
        format!("balanced accuracy, macro F1, kappa and macro AUC: max |diff| {worst:.1e} over 200 permutations"),
    ))
}

fn fixtures() -> dcsst::Result<Check> {
    let cm = ConfusionMatrix::from_counts(vec![vec![40, 10], vec![5, 45]])?;
    let bal = balanced_accuracy(&cm)?;
    let f = f1(&cm, F1Mode::Positive(1));
    let kappa = cohens_kappa(&cm)?;
    // Hand computation: recalls 40/50 and 45/50; F1 = 2·45/(2·45+10+5);
    // p_o = 0.85, p_e = (50·45 + 50·55)/100² = 0.5.
    let ok_cm = (bal - 0.85).abs() < TOL && (f - 90.0 / 105.0).abs() < TOL && (kappa - 0.7).abs() < TOL;
    let auc = binary_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false])?;
    let runs: Vec<RunMetrics> = [0.90, 0.92, 0.94, 0.92]
        .iter()
        .map(|&v| RunMetrics {
            seed: 0,
            auc_roc: v,
            balanced_accuracy: v,
            f1: v,
            cohens_kappa: v,
        })
        .collect();
    let report = aggregate_runs(runs)?;
    // Sample std with n−1: sqrt((0.02² + 0 + 0.02² + 0) / 3).
    let std_ok = (report.auc_roc.std.unwrap() - (0.0008f64 / 3.0).sqrt()).abs() < TOL
        && (report.auc_roc.mean - 0.92).abs() < TOL;
    Ok(check(
        "worked fixtures",
        ok_cm && auc == 0.75 && std_ok,
        format!(
            "bal-acc {bal:.4}, F1 {f:.4}, kappa {kappa:.4}, AUC {auc}, aggregate {}",
            report.auc_roc.render()
        ),
    ))
}

pub fn run() -> Vec<Check> {
    vec![
        guard("confusion-matrix oracle", confusion_oracle),
        guard("AUC oracle", auc_oracle),
        guard("relabelling", relabel_invariance),
        guard("fixtures", fixtures),
    ]
}
