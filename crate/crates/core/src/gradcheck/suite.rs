//! Named gradient checks for every differentiable tape operation and for
//! the model's composite modules.
//!
//! Each operation is checked on a series of randomly drawn small shapes;
//! the returned report carries the worst error over all cases.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{check, GradCheckOptions, GradCheckReport};
use crate::attention::{self, AttentionConfig, CrossAttention, SelfAttention, WindowSpec};
use crate::autodiff::{Tape, Var};
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, StageWindows};
use crate::nn::{Bound, Builder, ParamStore};
use crate::predictor::{self, StageMixture};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Tape operations with a backward rule, plus the attention-layer
/// primitives built on them.
pub const OPS: &[&str] = &[
    "matmul",
    "linear",
    "conv1x1",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "gelu",
    "relu",
    "add_bias",
    "mul_per_batch",
    "reshape",
    "permute",
    "expand",
    "sum_axis",
    "mean_axis",
    "sum",
    "mean",
    "mean_pool",
    "concat",
    "slice",
    "gather_rows",
    "avg_pool2d",
    "softmax",
    "log_softmax",
    "normalize_axis",
    "layer_norm",
    "cross_entropy",
    "window_partition",
    "window_reverse",
    "scaled_dot_product",
];

/// Composite modules, checked with respect to inputs and every parameter.
pub const MODULES: &[&str] = &[
    "self_attention",
    "window_attention",
    "scale_mixture",
    "cross_attention",
    "stage",
    "consistency",
    "model",
];

pub const DEFAULT_CASES: usize = 20;

type Closure = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    f: Closure,
}

fn case(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        f: Box::new(f),
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng::standard_normal(rng))
}

/// Values bounded away from zero in magnitude.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

fn op_case(name: &str, i: usize, rng: &mut Rng) -> Result<Case> {
    let c = match name {
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            let b = rng.random_range(1..=3);
            let (sa, sb): (Vec<usize>, Vec<usize>) = match i % 4 {
                0 => (vec![m, k], vec![k, n]),
                1 => (vec![b, m, k], vec![b, k, n]),
                2 => (vec![b, 1, m, k], vec![2, k, n]),
                _ => (vec![b, m, k], vec![k, n]),
            };
            case(vec![normal(rng, &sa), normal(rng, &sb)], |t, v| t.matmul(v[0], v[1]))
        }
        "linear" => {
            let s = dims(rng, 3, 3);
            let n = rng.random_range(1..=4);
            let x = normal(rng, &s);
            let w = normal(rng, &[s[2], n]);
            let b = normal(rng, &[n]);
            case(vec![x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])))
        }
        "conv1x1" => {
            let s = dims(rng, 4, 3);
            let out = rng.random_range(1..=3);
            let x = normal(rng, &s);
            let w = normal(rng, &[out, s[1]]);
            let b = normal(rng, &[out]);
            case(vec![x, w, b], |t, v| t.conv1x1(v[0], v[1], v[2]))
        }
        "add" | "sub" | "mul" => {
            let r = rng.random_range(1..=4);
            let s = dims(rng, r, 3);
            let inputs = vec![normal(rng, &s), normal(rng, &s)];
            match name {
                "add" => case(inputs, |t, v| t.add(v[0], v[1])),
                "sub" => case(inputs, |t, v| t.sub(v[0], v[1])),
                _ => case(inputs, |t, v| t.mul(v[0], v[1])),
            }
        }
        "div" => {
            let r = rng.random_range(1..=3);
            let s = dims(rng, r, 4);
            let a = normal(rng, &s);
            let b = away_from_zero(rng, &s, 0.5, 2.0);
            case(vec![a, b], |t, v| t.div(v[0], v[1]))
        }
        "scale" => {
            let r = rng.random_range(1..=3);
            let s = dims(rng, r, 4);
            let k = rng.random_range(-3.0..3.0);
            case(vec![normal(rng, &s)], move |t, v| t.scale(v[0], k))
        }
        "gelu" => {
            let r = rng.random_range(1..=3);
            let s = dims(rng, r, 4);
            let x = uniform(rng, &s, -4.0, 4.0);
            case(vec![x], |t, v| t.gelu(v[0]))
        }
        "relu" => {
            let r = rng.random_range(1..=3);
            let s = dims(rng, r, 4);
            case(vec![away_from_zero(rng, &s, 0.05, 2.0)], |t, v| t.relu(v[0]))
        }
        "add_bias" => {
            let r = rng.random_range(1..=3);
            let s = dims(rng, r, 4);
            let n = *s.last().unwrap();
            case(vec![normal(rng, &s), normal(rng, &[n])], |t, v| t.add_bias(v[0], v[1]))
        }
        "mul_per_batch" => {
            let r = rng.random_range(1..=4);
            let s = dims(rng, r, 3);
            let w = normal(rng, &[s[0]]);
            case(vec![normal(rng, &s), w], |t, v| t.mul_per_batch(v[0], v[1]))
        }
        "reshape" => {
            let s = dims(rng, 3, 4);
            let n: usize = s.iter().product();
            let target = if i % 2 == 0 { vec![n] } else { vec![s[2], s[0] * s[1]] };
            // Reshape is linear, so follow it with a nonlinearity to give the
            // projection a non-trivial Jacobian to compare.
            case(vec![normal(rng, &s)], move |t, v| {
                let y = t.reshape(v[0], &target)?;
                t.mul(y, y)
            })
        }
        "permute" => {
            let r = rng.random_range(2..=4);
            let s = dims(rng, r, 3);
            let mut perm: Vec<usize> = (0..r).collect();
            perm.shuffle(rng);
            case(vec![normal(rng, &s)], move |t, v| t.permute(v[0], &perm))
        }
        "expand" => {
            let r = rng.random_range(1..=3);
            let s = dims(rng, r, 3);
            let axis = rng.random_range(0..=r);
            let n = rng.random_range(1..=3);
            case(vec![normal(rng, &s)], move |t, v| t.expand(v[0], axis, n))
        }
        "sum_axis" | "mean_axis" => {
            let r = rng.random_range(1..=4);
            let s = dims(rng, r, 3);
            let axis = rng.random_range(0..r);
            if name == "sum_axis" {
                case(vec![normal(rng, &s)], move |t, v| t.sum_axis(v[0], axis))
            } else {
                case(vec![normal(rng, &s)], move |t, v| t.mean_axis(v[0], axis))
            }
        }
        "sum" | "mean" => {
            let r = rng.random_range(1..=4);
            let s = dims(rng, r, 3);
            if name == "sum" {
                case(vec![normal(rng, &s)], |t, v| t.sum(v[0]))
            } else {
                case(vec![normal(rng, &s)], |t, v| t.mean(v[0]))
            }
        }
        "mean_pool" => {
            let s = dims(rng, 4, 3);
            case(vec![normal(rng, &s)], |t, v| t.mean_pool(v[0]))
        }
        "concat" => {
            let r = rng.random_range(1..=3);
            let s = dims(rng, r, 3);
            let axis = rng.random_range(0..r);
            let parts = rng.random_range(2..=3);
            let inputs: Vec<Tensor> = (0..parts)
                .map(|_| {
                    let mut si = s.clone();
                    si[axis] = rng.random_range(1..=3);
                    normal(rng, &si)
                })
                .collect();
            case(inputs, move |t, v| t.concat(v, axis))
        }
        "slice" => {
            let r = rng.random_range(1..=3);
            let mut s = dims(rng, r, 3);
            let axis = rng.random_range(0..r);
            s[axis] += 2;
            let start = rng.random_range(0..s[axis]);
            let len = rng.random_range(1..=s[axis] - start);
            case(vec![normal(rng, &s)], move |t, v| t.slice(v[0], axis, start, len))
        }
        "gather_rows" => {
            let rows = rng.random_range(1..=5);
            let row_len = rng.random_range(1..=3);
            let out_rows = rng.random_range(1..=7);
            let index: Vec<Option<usize>> = (0..out_rows)
                .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..rows)))
                .collect();
            case(vec![normal(rng, &[rows, row_len])], move |t, v| {
                t.gather_rows(v[0], row_len, index.clone(), &[out_rows, row_len])
            })
        }
        "avg_pool2d" => {
            let k = rng.random_range(1..=3);
            let (b, c) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let (h, w) = (k * rng.random_range(1..=3), k * rng.random_range(1..=3));
            case(vec![normal(rng, &[b, c, h, w])], move |t, v| t.avg_pool2d(v[0], k))
        }
        "softmax" | "log_softmax" | "normalize_axis" => {
            let r = rng.random_range(1..=3);
            let s = dims(rng, r, 4);
            let axis = rng.random_range(0..r);
            match name {
                "softmax" => case(vec![uniform(rng, &s, -3.0, 3.0)], move |t, v| t.softmax(v[0], axis)),
                "log_softmax" => case(vec![uniform(rng, &s, -3.0, 3.0)], move |t, v| t.log_softmax(v[0], axis)),
                _ => case(vec![uniform(rng, &s, 0.2, 2.0)], move |t, v| t.normalize_axis(v[0], axis)),
            }
        }
        "layer_norm" => {
            let r = rng.random_range(1..=3);
            let mut s = dims(rng, r, 3);
            *s.last_mut().unwrap() = rng.random_range(2..=6);
            let n = *s.last().unwrap();
            let x = normal(rng, &s);
            let g = uniform(rng, &[n], 0.5, 1.5);
            let b = normal(rng, &[n]);
            case(vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "cross_entropy" => {
            let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=5));
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let weights: Option<Vec<f64>> = (i % 2 == 1).then(|| (0..n).map(|_| rng.random_range(0.1..2.0)).collect());
            let x = uniform(rng, &[n, k], -3.0, 3.0);
            case(vec![x], move |t, v| t.cross_entropy(v[0], &targets, weights.as_deref()))
        }
        "window_partition" | "window_reverse" => {
            let window = rng.random_range(1..=3);
            let shift = rng.random_range(0..window);
            let (b, c) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let h = rng.random_range(window..=window + 3);
            let w = rng.random_range(window..=window + 3);
            let spec = WindowSpec::new(window, shift)?;
            if name == "window_partition" {
                case(vec![normal(rng, &[b, c, h, w])], move |t, v| attention::window_partition(t, v[0], spec))
            } else {
                let layout = attention::WindowLayout::new(b, h, w, spec)?;
                let shape = [layout.num_windows(), layout.tokens_per_window(), c];
                case(vec![normal(rng, &shape)], move |t, v| {
                    attention::window_reverse(t, v[0], spec, &[b, c, h, w])
                })
            }
        }
        "scaled_dot_product" => {
            let (nb, h, d) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=3));
            let (lq, lk) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let q = normal(rng, &[nb, h, lq, d]);
            let k = normal(rng, &[nb, h, lk, d]);
            let v = normal(rng, &[nb, h, lk, d]);
            // Mask every key but the first for a random subset of rows.
            let mask = (i % 2 == 1).then(|| {
                Tensor::from_fn([nb, h, lq, lk], |j| {
                    if j % lk != 0 && rng.random_bool(0.3) {
                        attention::MASK_VALUE
                    } else {
                        0.0
                    }
                })
            });
            case(vec![q, k, v], move |t, x| {
                Ok(attention::scaled_dot_product(t, x[0], x[1], x[2], mask.clone())?.out)
            })
        }
        other => return Err(Error::Config(format!("unknown gradcheck operation {other:?}"))),
    };
    Ok(c)
}

fn merge(name: &str, reports: Vec<GradCheckReport>, tolerance: f64) -> GradCheckReport {
    GradCheckReport {
        name: name.to_string(),
        max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        per_input: reports.iter().map(|r| r.max_rel_err).collect(),
        coords_checked: reports.iter().map(|r| r.coords_checked).sum(),
        tolerance,
    }
}

/// Checks operation `name` on `cases` random shapes; `per_input` of the
/// result holds the worst error of each case.
pub fn check_op(name: &str, cases: usize, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, "gradcheck-op", 0);
    let mut reports = Vec::with_capacity(cases);
    for i in 0..cases {
        let c = op_case(name, i, &mut rng)?;
        reports.push(check(&format!("{name}#{i}"), &c.inputs, opts, |t, v| (c.f)(t, v))?);
    }
    Ok(merge(name, reports, opts.tolerance))
}

const PARAM_STD: f64 = 0.4;

fn module_params(seed: u64, build: impl FnOnce(&mut Builder<'_>)) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "gradcheck-params", 0);
    let mut b = Builder {
        store: &mut store,
        rng: &mut r,
        randomize_all: Some(PARAM_STD),
    };
    build(&mut b);
    store
}

/// `inputs` followed by every parameter of `store`.
fn with_params(inputs: Vec<Tensor>, store: &ParamStore) -> Vec<Tensor> {
    inputs.into_iter().chain(store.tensors().iter().cloned()).collect()
}

fn bound(vars: &[Var], skip: usize) -> Bound {
    Bound::from_vars(vars[skip..].to_vec())
}

fn micro_model(seed: u64) -> Result<Model> {
    Model::randomized(ModelConfig::micro(), seed, PARAM_STD)
}

/// Checks composite module `name` with respect to its inputs and parameters.
pub fn check_module(name: &str, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, "gradcheck-module", 0);
    match name {
        "self_attention" => {
            let cfg = AttentionConfig::new(4, 2)?;
            let mut attn = None;
            let store = module_params(seed, |b| attn = Some(SelfAttention::build(b, "attn", cfg)));
            let attn = attn.unwrap();
            let l = 5;
            let mask = Tensor::from_fn([l, l], |j| if j % l > j / l + 1 { attention::MASK_VALUE } else { 0.0 });
            let x = normal(&mut rng, &[2, l, 4]);
            check(name, &with_params(vec![x], &store), opts, |t, v| {
                let p = bound(v, 1);
                Ok(attn.forward(t, &p, v[0], Some(&mask))?.out)
            })
        }
        "window_attention" => {
            let cfg = AttentionConfig::new(4, 2)?;
            let mut attn = None;
            let store = module_params(seed, |b| attn = Some(SelfAttention::build(b, "attn", cfg)));
            let attn = attn.unwrap();
            // 5×5 map with window 3 and shift 1: padded and shifted.
            let spec = WindowSpec::new(3, 1)?;
            let x = normal(&mut rng, &[1, 5, 5, 4]);
            check(name, &with_params(vec![x], &store), opts, |t, v| {
                let p = bound(v, 1);
                attn.window_forward(t, &p, v[0], spec)
            })
        }
        "scale_mixture" => {
            let cfg = AttentionConfig::new(4, 2)?;
            let candidates = vec![1, 2, 4];
            let mut attn = None;
            let store = module_params(seed, |b| attn = Some(SelfAttention::build(b, "attn", cfg)));
            let attn = attn.unwrap();
            let image = normal(&mut rng, &[2, 3, 8, 8]);
            let pw = normal(&mut rng, &[3, 3]);
            let pb = normal(&mut rng, &[3]);
            let x = normal(&mut rng, &[2, 4, 4, 4]);
            check(name, &with_params(vec![image, pw, pb, x], &store), opts, |t, v| {
                let p = bound(v, 4);
                let field = predictor::predict_scales(t, v[0], v[1], v[2], &candidates)?;
                let mixture: StageMixture = predictor::pool_to_stage(t, &field, (4, 4))?;
                predictor::mixed_window_forward(t, &p, &attn, v[3], mixture, &candidates, true)
            })
        }
        "cross_attention" => {
            let cfg = AttentionConfig::new(4, 2)?;
            let mut cross = None;
            let store = module_params(seed, |b| cross = Some(CrossAttention::build(b, "cross", cfg)));
            let cross = cross.unwrap();
            let cur = normal(&mut rng, &[2, 4, 2, 3]);
            let prev = normal(&mut rng, &[2, 4, 2, 3]);
            check(name, &with_params(vec![cur, prev], &store), opts, |t, v| {
                let p = bound(v, 2);
                cross.forward(t, &p, v[0], v[1])
            })
        }
        "stage" => {
            let model = micro_model(seed)?;
            let side = model.cfg.stage_side(0);
            let x = normal(&mut rng, &[1, side, side, model.cfg.stage_dim(0)]);
            let mixture = Tensor::new([1, 3], vec![0.5, 0.3, 0.2])?;
            let candidates = model.cfg.stage_candidates(0);
            check(name, &with_params(vec![x, mixture], &model.params), opts, |t, v| {
                let p = bound(v, 2);
                let windows = StageWindows::Mixed {
                    mixture: StageMixture { weights: v[1] },
                    candidates: candidates.clone(),
                };
                model.stage_forward(t, &p, 0, v[0], &windows)
            })
        }
        "consistency" => {
            let model = micro_model(seed)?;
            let images = uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0);
            let schedule = NoiseSchedule::default();
            let (model_ref, sched) = (&model, &schedule);
            check(name, &with_params(vec![], &model.params), opts, |t, v| {
                let p = bound(v, 0);
                let mut noise = rng::stream(seed, "gradcheck-noise", 0);
                diffusion::consistency_loss(t, model_ref, &p, &images, sched, 10, &mut noise)
            })
        }
        "model" => {
            let model = micro_model(seed)?;
            let images = uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0);
            check(name, &with_params(vec![images], &model.params), opts, |t, v| {
                let p = bound(v, 1);
                model.forward(t, &p, v[0])
            })
        }
        other => Err(Error::Config(format!("unknown gradcheck module {other:?}"))),
    }
}

/// Runs every operation and module check.
pub fn run_all(seed: u64, cases: usize, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::with_capacity(OPS.len() + MODULES.len());
    for op in OPS {
        out.push(check_op(op, cases, seed, opts)?);
    }
    for m in MODULES {
        out.push(check_module(m, seed, opts)?);
    }
    Ok(out)
}
