use dcsst::attention::{
    self, AttentionConfig, CrossAttention, SelfAttention, WindowLayout, WindowSpec, MASK_VALUE,
};
use dcsst::model::{Ablation, Model, ModelConfig};
use dcsst::nn::{Builder, ParamStore};
use dcsst::predictor::{self, StageMixture};
use dcsst::rng::{self, Rng};
use dcsst::{Tape, Tensor};
use rand::Rng as _;

use crate::common::random_tensor;
use crate::{check, guard, Check};

fn self_attention(dim: usize, heads: usize, seed: u64) -> (SelfAttention, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "acceptance-attn", 0);
    let mut b = Builder {
        store: &mut store,
        rng: &mut r,
        randomize_all: Some(0.5),
    };
    let attn = SelfAttention::build(&mut b, "attn", AttentionConfig::new(dim, heads).unwrap());
    (attn, store)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

/// Window attention at one fixed candidate.
fn fixed(attn: &SelfAttention, store: &ParamStore, x: &Tensor, window: usize, shifted: bool) -> dcsst::Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let s = x.shape();
    let spec = predictor::candidate_spec(window, s[1], s[2], shifted)?;
    let out = attn.window_forward(&mut tape, &p, xv, spec)?;
    Ok(tape.value(out).clone())
}

fn mixed(
    attn: &SelfAttention,
    store: &ParamStore,
    x: &Tensor,
    mixture: &Tensor,
    candidates: &[usize],
    shifted: bool,
) -> dcsst::Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let weights = tape.constant(mixture.clone());
    let out = predictor::mixed_window_forward(&mut tape, &p, attn, xv, StageMixture { weights }, candidates, shifted)?;
    Ok(tape.value(out).clone())
}

fn one_hot(b: usize, s: usize, k: usize) -> Tensor {
    Tensor::from_fn([b, s], |i| if i % s == k { 1.0 } else { 0.0 })
}

fn one_hot_reduction() -> dcsst::Result<Check> {
    let mut rng = rng::stream(1, "acceptance-onehot", 0);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (side, candidates) in [(8, vec![2, 4, 8]), (6, vec![2, 4, 5]), (4, vec![1, 2, 3, 4])] {
        let (attn, store) = self_attention(8, 2, side as u64);
        let x = random_tensor(&mut rng, &[2, side, side, 8]);
        for shifted in [false, true] {
            for (k, &w) in candidates.iter().enumerate() {
                let got = mixed(&attn, &store, &x, &one_hot(2, candidates.len(), k), &candidates, shifted)?;
                let want = fixed(&attn, &store, &x, w, shifted)?;
                worst = worst.max(max_diff(&got, &want));
                cases += 1;
            }
        }
    }
    Ok(check(
        "one-hot mixture equals fixed-window attention",
        worst <= 1e-12,
        format!("{cases} (map, candidate, shift) cases, max |diff| {worst:.1e}"),
    ))
}

fn duplicates_and_convexity() -> dcsst::Result<Check> {
    let mut rng = rng::stream(2, "acceptance-convex", 0);
    let (attn, store) = self_attention(8, 4, 5);
    let x = random_tensor(&mut rng, &[3, 8, 8, 8]);
    let dup = mixed(&attn, &store, &x, &Tensor::full([3, 2], 0.5), &[4, 4], true)?;
    let dup_diff = max_diff(&dup, &fixed(&attn, &store, &x, 4, true)?);

    let candidates = [2, 4, 8];
    let mixture = Tensor::from_fn([3, 3], |i| [0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.0, 0.25, 0.75][i]);
    let out = mixed(&attn, &store, &x, &mixture, &candidates, false)?;
    let per_scale: Vec<Tensor> = candidates
        .iter()
        .map(|&w| fixed(&attn, &store, &x, w, false))
        .collect::<dcsst::Result<_>>()?;
    let mut outside: f64 = 0.0;
    for (i, &v) in out.data().iter().enumerate() {
        let lo = per_scale.iter().map(|t| t.data()[i]).fold(f64::INFINITY, f64::min);
        let hi = per_scale.iter().map(|t| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        outside = outside.max(lo - v).max(v - hi);
    }
    Ok(check(
        "duplicate candidates and convexity",
        dup_diff <= 1e-12 && outside <= 1e-9,
        format!("uniform [4,4] vs window 4: {dup_diff:.1e}; worst excursion outside per-scale hull {:.1e}", outside.max(0.0)),
    ))
}

/// Sets the full model's predictor to a saturated one-hot at candidate `k`
/// and zeroes every cross-attention output projection.
fn pin_mechanisms(model: &mut Model, k: usize) -> dcsst::Result<()> {
    let s = model.cfg.candidate_windows.len();
    let names: Vec<String> = model.params.names().to_vec();
    for n in names {
        let shape = model.params.by_name(&n).unwrap().shape().to_vec();
        if n == "predictor.bias" {
            model.params.set(&n, Tensor::from_fn([s], |i| if i == k { 2000.0 } else { 0.0 }))?;
        } else if n == "predictor.weight" || (n.contains(".fuse.cross.proj.")) {
            model.params.set(&n, Tensor::zeros(shape))?;
        }
    }
    Ok(())
}

fn baseline_reduction() -> dcsst::Result<Check> {
    let mut details = Vec::new();
    let mut ok = true;
    for (name, cfg) in [("micro", ModelConfig::micro()), ("tiny", ModelConfig::tiny())] {
        let mut full = Model::randomized(cfg.clone(), 4, 0.3)?;
        let fixed_w = cfg.fixed_window;
        let k = cfg.candidate_windows.iter().position(|&w| w == fixed_w).expect("fixed window is a candidate");
        pin_mechanisms(&mut full, k)?;
        let mut base_cfg = cfg.clone();
        Ablation::Baseline.apply(&mut base_cfg);
        let mut base = Model::new(base_cfg.clone(), 0)?;
        for n in base.params.names().to_vec() {
            base.params.set(&n, full.params.by_name(&n).unwrap().clone())?;
        }
        let extra: Vec<&str> = full
            .params
            .names()
            .iter()
            .filter(|n| base.params.by_name(n).is_none())
            .map(|s| s.as_str())
            .collect();
        let only_mechanisms = extra.iter().all(|n| n.starts_with("predictor.") || n.contains(".fuse."));
        let mut rng = rng::stream(3, "acceptance-baseline", 0);
        let x = random_tensor(&mut rng, &[2, cfg.in_channels, cfg.image_size, cfg.image_size]);
        let diff = max_diff(&full.logits(&x)?, &base.logits(&x)?);
        let count_ok = base.params.num_scalars() == base_cfg.param_count();
        ok &= diff <= 1e-12 && only_mechanisms && count_ok;
        details.push(format!(
            "{name}: logits diff {diff:.1e}, {} mechanism-only tensors removed, param count {}",
            extra.len(),
            base.params.num_scalars()
        ));
    }
    Ok(check("mechanisms off is the plain windowed transformer", ok, details.join("; ")))
}

/// Side of the wrap-around seam a rolled coordinate came from.
fn seam_side(rolled: usize, extent: usize, shift: usize) -> bool {
    shift > 0 && rolled >= extent - shift
}

fn shift_mask_isolation() -> dcsst::Result<Check> {
    let mut rng = rng::stream(4, "acceptance-shift", 0);
    let mut worst_leak: f64 = 0.0;
    let mut mask_mismatch = 0;
    let mut row_err: f64 = 0.0;
    let mut negative = false;
    let mut pairs = 0;
    for (h, w, win, shift) in [(8, 8, 4, 2), (6, 6, 3, 1), (7, 5, 3, 1), (4, 4, 2, 1), (5, 7, 4, 2)] {
        let spec = WindowSpec::new(win, shift)?;
        let layout = WindowLayout::new(2, h, w, spec)?;
        let (attn, store) = self_attention(4, 2, 9);
        let x = random_tensor(&mut rng, &[2, h, w, 4]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let qkv = attn.qkv.forward(&mut tape, &p, xv)?;
        let out = attn.window_heads(&mut tape, qkv, spec)?;
        let weights = tape.value(out.weights).clone();
        let l = layout.tokens_per_window();
        let nw = layout.windows_per_image();
        let per_row = layout.padded_w / win;
        let mask = layout.mask().expect("shifted layouts are masked");
        for wb in 0..layout.num_windows() {
            let win_idx = wb % nw;
            let (wi, wj) = (win_idx / per_row, win_idx % per_row);
            let info: Vec<(bool, bool, bool)> = (0..l)
                .map(|pos| {
                    let (ry, rx) = (wi * win + pos / win, wj * win + pos % win);
                    let (y, x) = ((ry + shift) % layout.padded_h, (rx + shift) % layout.padded_w);
                    (
                        seam_side(ry, layout.padded_h, shift),
                        seam_side(rx, layout.padded_w, shift),
                        y < h && x < w,
                    )
                })
                .collect();
            for i in 0..l {
                for j in 0..l {
                    let allowed = info[i].0 == info[j].0 && info[i].1 == info[j].1 && info[j].2;
                    let m = mask.data()[(win_idx * l + i) * l + j];
                    if (m == 0.0) != allowed || (m != 0.0 && m != MASK_VALUE) {
                        mask_mismatch += 1;
                    }
                    for head in 0..2 {
                        let a = weights.data()[((wb * 2 + head) * l + i) * l + j];
                        negative |= a < 0.0;
                        if !allowed && info[i].2 {
                            worst_leak = worst_leak.max(a);
                            pairs += 1;
                        }
                    }
                }
            }
        }
        for row in weights.data().chunks_exact(l) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(check(
        "shift/padding mask isolation and row-stochasticity",
        worst_leak < 1e-12 && mask_mismatch == 0 && row_err <= 1e-9 && !negative,
        format!(
            "{pairs} forbidden (real query, key, head) pairs, max weight {worst_leak:.1e}; mask disagreements {mask_mismatch}; max |row sum − 1| {row_err:.1e}"
        ),
    ))
}

fn inverse_pairs() -> dcsst::Result<Check> {
    let mut rng = rng::stream(5, "acceptance-inverse", 0);
    let mut failures = 0;
    let mut padded = 0;
    for _ in 0..200 {
        let win = rng.random_range(1..=4);
        let shift = rng.random_range(0..win);
        let (b, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(win..=9), rng.random_range(win..=9));
        let spec = WindowSpec::new(win, shift)?;
        padded += usize::from(h % win != 0 || w % win != 0);
        let x = random_tensor(&mut rng, &[b, c, h, w]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let parts = attention::window_partition(&mut tape, xv, spec)?;
        let back = attention::window_reverse(&mut tape, parts, spec, &[b, c, h, w])?;
        if tape.value(back) != &x {
            failures += 1;
        }
    }
    Ok(check(
        "window partition / reverse inverse pair",
        failures == 0,
        format!("200 random shapes ({padded} padded), {failures} not bit-exact"),
    ))
}

fn permutation_equivariance() -> dcsst::Result<Check> {
    let mut rng = rng::stream(6, "acceptance-perm", 0);
    let (attn, store) = self_attention(6, 3, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let l = rng.random_range(2..=9);
        let x = random_tensor(&mut rng, &[2, l, 6]);
        let perm = rng::permutation(&mut rng, l);
        let px = Tensor::from_fn([2, l, 6], |i| {
            let (b, t, c) = (i / (l * 6), (i / 6) % l, i % 6);
            x.data()[(b * l + perm[t]) * 6 + c]
        });
        let run = |x: &Tensor| -> dcsst::Result<Tensor> {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = attn.forward(&mut tape, &p, xv, None)?;
            Ok(tape.value(out.out).clone())
        };
        let (y, py) = (run(&x)?, run(&px)?);
        for b in 0..2 {
            for t in 0..l {
                for c in 0..6 {
                    let d = py.data()[(b * l + t) * 6 + c] - y.data()[(b * l + perm[t]) * 6 + c];
                    worst = worst.max(d.abs());
                }
            }
        }
    }
    Ok(check(
        "permutation equivariance of unmasked attention",
        worst <= 1e-10,
        format!("20 random sequences, max |diff| {worst:.1e}"),
    ))
}

fn cross_attention_invariants() -> dcsst::Result<Check> {
    let mut rng: Rng = rng::stream(7, "acceptance-cross", 0);
    let mut store = ParamStore::new();
    let mut r = rng::stream(7, "acceptance-cross-params", 0);
    let mut b = Builder {
        store: &mut store,
        rng: &mut r,
        randomize_all: Some(0.5),
    };
    let cross = CrossAttention::build(&mut b, "cross", AttentionConfig::new(4, 2)?);
    let current = random_tensor(&mut rng, &[2, 4, 3, 5]);
    let prev_const = Tensor::from_fn([2, 4, 3, 5], |i| [0.3, -1.2, 0.7, 2.0][(i / 15) % 4] + (i / 60) as f64);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let cur = tape.constant(current.clone());
    let prv = tape.constant(prev_const);
    let att = cross.attended(&mut tape, &p, cur, prv)?;
    let fused = cross.forward(&mut tape, &p, cur, prv)?;
    let attended = tape.value(att.out).clone();
    let mut spread: f64 = 0.0;
    for bc in attended.data().chunks_exact(15) {
        let first = bc[0];
        spread = spread.max(bc.iter().map(|v| (v - first).abs()).fold(0.0, f64::max));
    }
    let weights = tape.value(att.weights);
    let row_err = weights
        .data()
        .chunks_exact(15)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let shape_ok = tape.shape(fused) == current.shape();
    Ok(check(
        "cross-attention invariants",
        spread <= 1e-12 && row_err <= 1e-9 && shape_ok,
        format!("constant keys: attended spread over positions {spread:.1e}; max |row sum − 1| {row_err:.1e}; output shape preserved {shape_ok}"),
    ))
}

pub fn run() -> Vec<Check> {
    vec![
        guard("one-hot reduction", one_hot_reduction),
        guard("duplicates and convexity", duplicates_and_convexity),
        guard("baseline reduction", baseline_reduction),
        guard("shift mask", shift_mask_isolation),
        guard("inverse pairs", inverse_pairs),
        guard("permutation equivariance", permutation_equivariance),
        guard("cross attention", cross_attention_invariants),
    ]
}
