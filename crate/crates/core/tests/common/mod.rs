//! Reference implementations used as oracles by the integration tests.
#![allow(dead_code)]

use dcsst::data::{self, ImageRecord};
use dcsst::rng::{self, Rng};
use dcsst::train::TrainData;
use dcsst::Tensor;
use rand::Rng as _;

/// Expands a confusion matrix into `(truth, pred)` sample pairs.
pub fn expand(counts: &[Vec<u64>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            out.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    out
}

/// Mean per-class recall, counted sample by sample. `None` if a class has
/// no samples.
pub fn brute_balanced_accuracy(samples: &[(usize, usize)], k: usize) -> Option<f64> {
    let mut recalls = Vec::with_capacity(k);
    for c in 0..k {
        let of_class: Vec<_> = samples.iter().filter(|s| s.0 == c).collect();
        if of_class.is_empty() {
            return None;
        }
        let hits = of_class.iter().filter(|s| s.1 == c).count();
        recalls.push(hits as f64 / of_class.len() as f64);
    }
    Some(recalls.iter().sum::<f64>() / k as f64)
}

pub fn brute_f1_class(samples: &[(usize, usize)], c: usize) -> f64 {
    let tp = samples.iter().filter(|s| s.0 == c && s.1 == c).count() as f64;
    let predicted = samples.iter().filter(|s| s.1 == c).count() as f64;
    let actual = samples.iter().filter(|s| s.0 == c).count() as f64;
    if predicted == 0.0 && actual == 0.0 {
        return 0.0;
    }
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Positive-class F1 for two classes, macro F1 otherwise.
pub fn brute_f1(samples: &[(usize, usize)], k: usize) -> f64 {
    if k == 2 {
        brute_f1_class(samples, 1)
    } else {
        (0..k).map(|c| brute_f1_class(samples, c)).sum::<f64>() / k as f64
    }
}

/// Observed vs chance agreement from marginal frequencies.
pub fn brute_kappa(samples: &[(usize, usize)], k: usize) -> Option<f64> {
    let n = samples.len() as f64;
    if n == 0.0 {
        return None;
    }
    let po = samples.iter().filter(|s| s.0 == s.1).count() as f64 / n;
    let mut pe = 0.0;
    for c in 0..k {
        let a = samples.iter().filter(|s| s.0 == c).count() as f64 / n;
        let b = samples.iter().filter(|s| s.1 == c).count() as f64 / n;
        pe += a * b;
    }
    if (1.0 - pe).abs() < 1e-15 {
        return None;
    }
    Some((po - pe) / (1.0 - pe))
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins2 = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            wins2 += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    (pairs > 0).then(|| (wins2 as f64 / 2.0) / pairs as f64)
}

/// Binary AUC on column 1 for two classes, else macro one-vs-rest over the
/// classes present in `truth`.
pub fn pairwise_auc_multi(probs: &[f64], truth: &[usize], k: usize) -> Option<f64> {
    let column = |c: usize| -> Vec<f64> { probs.chunks_exact(k).map(|r| r[c]).collect() };
    if k == 2 {
        let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        return pairwise_auc(&column(1), &pos);
    }
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..k {
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if !pos.iter().any(|&p| p) {
            continue;
        }
        sum += pairwise_auc(&column(c), &pos)?;
        used += 1;
    }
    (used > 0).then(|| sum / used as f64)
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng::standard_normal(rng))
}

pub fn random_counts(rng: &mut Rng, k: usize, max: u64) -> Vec<Vec<u64>> {
    (0..k).map(|_| (0..k).map(|_| rng.random_range(0..=max)).collect()).collect()
}

/// Sample mean and unbiased variance.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Row-major `[B, C, H, W]` index.
pub fn nchw(shape: &[usize], b: usize, c: usize, y: usize, x: usize) -> usize {
    ((b * shape[1] + c) * shape[2] + y) * shape[3] + x
}

/// `per_class` synthetic images of each of four classes at `size`², labeled
/// in the id, in class-interleaved order.
pub fn synth_records(prefix: &str, per_class: usize, size: usize, seed: u64) -> Vec<ImageRecord> {
    (0..4 * per_class)
        .map(|i| {
            let label = i % 4;
            let mut r = rng::stream(seed, prefix, i as u64);
            ImageRecord {
                id: format!("{prefix}/{i:04}"),
                label,
                tensor: data::synth_image(label, size, 0.0, &mut r),
                original_size: (size, size),
            }
        })
        .collect()
}

/// Labeled and unlabeled 16² pools for the micro model, normalized with
/// labeled statistics.
pub fn micro_train_data(labeled_per_class: usize, unlabeled_per_class: usize, seed: u64) -> TrainData {
    let mut labeled = synth_records("lab", labeled_per_class, 16, seed);
    let mut unlabeled = synth_records("unl", unlabeled_per_class, 16, seed);
    let stats = data::pool_stats(&labeled).unwrap();
    data::normalize_all(&mut labeled, &stats).unwrap();
    data::normalize_all(&mut unlabeled, &stats).unwrap();
    TrainData {
        labeled,
        unlabeled,
        unlabeled_truth: true,
    }
}
