//! Per-pixel window-scale prediction and scale-mixed window attention.
//!
//! A 1×1 convolution followed by a softmax over `S` candidates turns the
//! input image into a [`ScaleField`]. Each stage pools that field to a
//! per-image [`StageMixture`] and runs window attention once per candidate
//! size with shared projections, blending the per-candidate outputs with
//! the mixture weights.

use crate::attention::{SelfAttention, WindowSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Init, ParamId, INIT_STD};
use crate::tensor::Tensor;

/// How a stage turns its mixture into window weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Selection {
    /// Differentiable convex blend of all candidates.
    #[default]
    Soft,
    /// Per-image argmax, one-hot and detached from the predictor.
    Hard,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Soft => "soft",
            Selection::Hard => "hard",
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Selection::Soft),
            "hard" => Ok(Selection::Hard),
            other => Err(Error::Config(format!("unknown selection mode {other:?}"))),
        }
    }
}

/// `probs: [B, S, H, W]`, a distribution over `candidates` at every pixel.
#[derive(Clone, Debug)]
pub struct ScaleField {
    pub probs: Var,
    pub candidates: Vec<usize>,
}

/// `weights: [B, S]`, one distribution over candidates per image.
#[derive(Clone, Copy, Debug)]
pub struct StageMixture {
    pub weights: Var,
}

/// `softmax_S(conv1x1(x; w, b))` for `x: [B, C, H, W]`, `w: [S, C]`, `b: [S]`.
pub fn predict_scales(tape: &mut Tape, x: Var, w: Var, b: Var, candidates: &[usize]) -> Result<ScaleField> {
    let s = tape.shape(w)[0];
    if s < 2 || s != candidates.len() {
        return Err(Error::Config(format!(
            "scale predictor needs S >= 2 outputs matching {} candidates, got {s}",
            candidates.len()
        )));
    }
    let xs = tape.shape(x).to_vec();
    if xs.len() == 4 {
        let side = xs[2].min(xs[3]);
        if let Some(&c) = candidates.iter().find(|&&c| c == 0 || c > side) {
            return Err(Error::Config(format!(
                "candidate window {c} does not fit a {}x{} map",
                xs[2], xs[3]
            )));
        }
    }
    let logits = tape.conv1x1(x, w, b)?;
    let probs = tape.softmax(logits, 1)?;
    Ok(ScaleField {
        probs,
        candidates: candidates.to_vec(),
    })
}

/// Area-resizes the field to `stage_hw`, averages over space and
/// renormalizes over candidates.
pub fn pool_to_stage(tape: &mut Tape, field: &ScaleField, stage_hw: (usize, usize)) -> Result<StageMixture> {
    let s = tape.shape(field.probs).to_vec();
    let (h, w) = (s[2], s[3]);
    let (th, tw) = stage_hw;
    let mut probs = field.probs;
    if th > 0 && th < h && h % th == 0 && tw > 0 && w % tw == 0 && h / th == w / tw {
        probs = tape.avg_pool2d(probs, h / th)?;
    }
    let mean = tape.mean_pool(probs)?;
    let weights = tape.normalize_axis(mean, 1)?;
    Ok(StageMixture { weights })
}

/// Replaces a mixture by its per-image argmax as a constant one-hot.
pub fn harden(tape: &mut Tape, mixture: StageMixture) -> Result<StageMixture> {
    let v = tape.value(mixture.weights);
    let (b, s) = (v.shape()[0], v.shape()[1]);
    let mut data = vec![0.0; b * s];
    for (i, row) in v.data().chunks_exact(s).enumerate() {
        let k = argmax(row);
        data[i * s + k] = 1.0;
    }
    let weights = tape.constant(Tensor::new([b, s], data)?);
    Ok(StageMixture { weights })
}

/// Index of the first maximal element.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Window spec used for candidate `window` on an `h × w` map.
pub fn candidate_spec(window: usize, h: usize, w: usize, shifted: bool) -> Result<WindowSpec> {
    let shift = if shifted && window < h.min(w) { window / 2 } else { 0 };
    WindowSpec::new(window, shift)
}

/// Scale-mixed window attention on channels-last tokens `[B, H, W, C]`.
pub fn mixed_window_forward(
    tape: &mut Tape,
    p: &Bound,
    attn: &SelfAttention,
    x: Var,
    mixture: StageMixture,
    candidates: &[usize],
    shifted: bool,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("dynamic_window_attention", &s, "expected [B, H, W, C]"));
    }
    let ms = tape.shape(mixture.weights).to_vec();
    if ms != [s[0], candidates.len()] {
        return Err(Error::dim("dynamic_window_attention", &ms, &[s[0], candidates.len()]));
    }
    let qkv = attn.qkv.forward(tape, p, x)?;
    let mut mixed: Option<Var> = None;
    for (k, &window) in candidates.iter().enumerate() {
        let spec = candidate_spec(window, s[1], s[2], shifted)?;
        let heads = attn.window_heads(tape, qkv, spec)?;
        let m = tape.slice(mixture.weights, 1, k, 1)?;
        let m = tape.reshape(m, &[s[0]])?;
        let term = tape.mul_per_batch(heads.out, m)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let mixed = mixed.ok_or_else(|| Error::Config("empty candidate window list".into()))?;
    attn.proj.forward(tape, p, mixed)
}

/// Scale-mixed window attention on `[B, C, H, W]` maps.
pub fn dynamic_window_attention(
    tape: &mut Tape,
    p: &Bound,
    attn: &SelfAttention,
    x: Var,
    mixture: StageMixture,
    candidates: &[usize],
    shifted: bool,
) -> Result<Var> {
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    let out = mixed_window_forward(tape, p, attn, t, mixture, candidates, shifted)?;
    tape.permute(out, &[0, 3, 1, 2])
}

/// The 1×1 convolution producing scale logits from the image.
#[derive(Clone, Debug)]
pub struct WindowPredictor {
    pub w: ParamId,
    pub b: ParamId,
    pub candidates: Vec<usize>,
}

impl WindowPredictor {
    pub fn build(b: &mut Builder<'_>, name: &str, in_channels: usize, candidates: &[usize]) -> Self {
        let s = candidates.len();
        Self {
            w: b.param(&format!("{name}.weight"), &[s, in_channels], Init::TruncNormal(INIT_STD)),
            b: b.param(&format!("{name}.bias"), &[s], Init::Zeros),
            candidates: candidates.to_vec(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<ScaleField> {
        predict_scales(tape, x, p.var(self.w), p.var(self.b), &self.candidates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_predictor_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 3, 4, 4], |i| i as f64 * 0.1));
        let w = tape.constant(Tensor::zeros([3, 3]));
        let b = tape.constant(Tensor::zeros([3]));
        let f = predict_scales(&mut tape, x, w, b, &[2, 4, 4]).unwrap();
        assert!(tape.value(f.probs).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn rejects_single_candidate_and_oversized_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let w1 = tape.constant(Tensor::zeros([1, 3]));
        let b1 = tape.constant(Tensor::zeros([1]));
        assert!(predict_scales(&mut tape, x, w1, b1, &[2]).is_err());
        let w = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2]));
        assert!(predict_scales(&mut tape, x, w, b, &[2, 8]).is_err());
    }

    #[test]
    fn hard_selection_picks_argmax() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::new([2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap());
        let h = harden(&mut tape, StageMixture { weights: m }).unwrap();
        assert_eq!(tape.value(h.weights).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(!tape.requires_grad(h.weights));
    }

    #[test]
    fn shift_is_dropped_when_window_covers_map() {
        assert_eq!(candidate_spec(4, 4, 4, true).unwrap().shift, 0);
        assert_eq!(candidate_spec(4, 8, 8, true).unwrap().shift, 2);
        assert_eq!(candidate_spec(2, 8, 8, false).unwrap().shift, 0);
    }
}
