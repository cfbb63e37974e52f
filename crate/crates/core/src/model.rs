//! The hierarchical windowed transformer with dynamic window selection and
//! cross-scale fusion.
//!
//! Internally every stage works on channels-last tokens `[B, H, W, C]`.
//! Stage `i` has `C_i = embed_dim · 2^i` channels on an `(S_0 / 2^i)²` grid,
//! where `S_0 = image_size / patch_size`.
//!
//! Parameter count, with `r = mlp_ratio`, `K = num_classes`, `S` candidate
//! windows, `I = in_channels`, `p = patch_size`:
//!
//! ```text
//! predictor      S·I + S                                  (dynamic_window)
//! patch embed    I·p²·C_0 + C_0 + 2·C_0
//! block (dim C)  4C + (3C² + 3C) + (C² + C) + (rC² + rC) + (rC² + C)
//! merge into i   8·C_{i-1} + 8·C_{i-1}²                   (i ≥ 1)
//! fusion at i    C_{i-1}·C_i + C_i + (C_i² + C_i) + (2C_i² + 2C_i) + (C_i² + C_i)
//! head           2·C_last + C_last·K + K
//! ```

use crate::attention::{AttentionConfig, CrossAttention, SelfAttention};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Init, LayerNorm, Linear, ParamStore, INIT_STD};
use crate::predictor::{self, Selection, StageMixture, WindowPredictor};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Channels of the first stage; doubled at every merge.
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub mlp_ratio: usize,
    /// Candidate window sizes, clipped per stage to the stage's side.
    pub candidate_windows: Vec<usize>,
    /// Window size used when dynamic windows are disabled.
    pub fixed_window: usize,
    pub num_classes: usize,
    pub selection: Selection,
    pub dynamic_window: bool,
    pub cross_scale: bool,
    /// First stage index that receives cross-scale fusion.
    pub cross_scale_from: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            depths: vec![2, 2, 2],
            num_heads: vec![2, 4, 8],
            mlp_ratio: 4,
            candidate_windows: vec![2, 4, 8],
            fixed_window: 4,
            num_classes: 4,
            selection: Selection::Soft,
            dynamic_window: true,
            cross_scale: true,
            cross_scale_from: 1,
        }
    }

    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            depths: vec![1, 1],
            num_heads: vec![2, 4],
            mlp_ratio: 2,
            fixed_window: 2,
            ..Self::desk()
        }
    }

    /// Two-stage, 8-pixel-patch variant of `desk` sized for a single CPU core.
    pub fn tiny() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 16,
            depths: vec![1, 1],
            num_heads: vec![2, 4],
            mlp_ratio: 2,
            ..Self::desk()
        }
    }

    /// Full-size backbone shape with a 1024-dimensional final stage.
    pub fn swin_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 4,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![4, 8, 16, 32],
            candidate_windows: vec![3, 7, 14],
            fixed_window: 7,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "micro" => Ok(Self::micro()),
            "tiny" => Ok(Self::tiny()),
            "swin_base" | "swin-base" => Ok(Self::swin_base()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    pub fn stage_side(&self, i: usize) -> usize {
        (self.image_size / self.patch_size) >> i
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }

    pub fn stage_candidates(&self, i: usize) -> Vec<usize> {
        let side = self.stage_side(i);
        self.candidate_windows.iter().map(|&w| w.min(side)).collect()
    }

    pub fn stage_fixed_window(&self, i: usize) -> usize {
        self.fixed_window.min(self.stage_side(i))
    }

    pub fn fusion_at(&self, i: usize) -> bool {
        self.cross_scale && i >= 1 && i >= self.cross_scale_from
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let n = self.num_stages();
        if n == 0 || self.num_heads.len() != n {
            return bad(format!("depths ({n}) and num_heads ({}) must be non-empty and equal length", self.num_heads.len()));
        }
        if self.depths.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        let side = self.image_size / self.patch_size;
        if side % (1 << (n - 1)) != 0 {
            return bad(format!("token grid {side} cannot be halved {} times", n - 1));
        }
        for i in 0..n {
            AttentionConfig::new(self.stage_dim(i), self.num_heads[i])?;
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.fixed_window == 0 {
            return bad("in_channels, embed_dim, mlp_ratio and fixed_window must be positive".into());
        }
        if self.dynamic_window && self.candidate_windows.len() < 2 {
            return bad("dynamic windows need at least two candidates".into());
        }
        if self.candidate_windows.iter().any(|&w| w == 0 || w > self.image_size) {
            return bad(format!("invalid candidate windows {:?}", self.candidate_windows));
        }
        Ok(())
    }

    /// Closed-form parameter count (see module docs).
    pub fn param_count(&self) -> usize {
        let (i_ch, p, r, k) = (self.in_channels, self.patch_size, self.mlp_ratio, self.num_classes);
        let s = self.candidate_windows.len();
        let mut total = 0;
        if self.dynamic_window {
            total += s * i_ch + s;
        }
        let c0 = self.stage_dim(0);
        total += i_ch * p * p * c0 + c0 + 2 * c0;
        for (i, &depth) in self.depths.iter().enumerate() {
            let c = self.stage_dim(i);
            if i >= 1 {
                let cp = self.stage_dim(i - 1);
                total += 8 * cp + 8 * cp * cp;
            }
            let block = 4 * c + (3 * c * c + 3 * c) + (c * c + c) + (r * c * c + r * c) + (r * c * c + c);
            total += depth * block;
            if self.fusion_at(i) {
                let cp = self.stage_dim(i - 1);
                total += cp * c + c + (c * c + c) + (2 * c * c + 2 * c) + (c * c + c);
            }
        }
        let cl = self.final_dim();
        total + 2 * cl + cl * k + k
    }
}

/// Mechanism switches for A/B comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoDynamicWindow,
    NoCrossScale,
    Baseline,
}

impl Ablation {
    /// The arm a configuration's mechanism switches correspond to.
    pub fn of(cfg: &ModelConfig) -> Self {
        match (cfg.dynamic_window, cfg.cross_scale) {
            (true, true) => Ablation::Full,
            (false, true) => Ablation::NoDynamicWindow,
            (true, false) => Ablation::NoCrossScale,
            (false, false) => Ablation::Baseline,
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        let (dw, cs) = match self {
            Ablation::Full => (true, true),
            Ablation::NoDynamicWindow => (false, true),
            Ablation::NoCrossScale => (true, false),
            Ablation::Baseline => (false, false),
        };
        cfg.dynamic_window = dw;
        cfg.cross_scale = cs;
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDynamicWindow => "no-dw",
            Ablation::NoCrossScale => "no-cs",
            Ablation::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-dw" => Ok(Ablation::NoDynamicWindow),
            "no-cs" => Ok(Ablation::NoCrossScale),
            "baseline" => Ok(Ablation::Baseline),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    /// `[B, I, H, W]` -> `[B, H/p, W/p, I·p²]`, each row ordered (channel, dy, dx).
    pub fn patches(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let p = self.patch;
        if s.len() != 4 || s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::Config(format!("image {s:?} not divisible into {p}x{p} patches")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2] / p, s[3] / p);
        let t = tape.reshape(x, &[b, c, h, p, w, p])?;
        let t = tape.permute(t, &[0, 2, 4, 1, 3, 5])?;
        tape.reshape(t, &[b, h, w, c * p * p])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let patches = self.patches(tape, x)?;
        let t = self.proj.forward(tape, p, patches)?;
        self.norm.forward(tape, p, t)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

/// Window choice for one stage: a fixed size or a scale mixture.
#[derive(Clone, Debug)]
pub enum StageWindows {
    Fixed(usize),
    Mixed {
        mixture: StageMixture,
        candidates: Vec<usize>,
    },
}

impl Block {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, windows: &StageWindows) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let h = self.norm1.forward(tape, p, x)?;
        let a = match windows {
            StageWindows::Fixed(w) => {
                let spec = predictor::candidate_spec(*w, s[1], s[2], self.shifted)?;
                self.attn.window_forward(tape, p, h, spec)?
            }
            StageWindows::Mixed { mixture, candidates } => {
                predictor::mixed_window_forward(tape, p, &self.attn, h, *mixture, candidates, self.shifted)?
            }
        };
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// 2×2 neighbourhood concatenation followed by LayerNorm and a bias-free
/// `4C -> 2C` projection.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("patch_merge", &s, "odd spatial size"));
        }
        let t = tape.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
        let t = tape.permute(t, &[0, 1, 3, 4, 2, 5])?;
        let t = tape.reshape(t, &[b, h / 2, w / 2, 4 * c])?;
        let t = self.norm.forward(tape, p, t)?;
        self.reduction.forward(tape, p, t)
    }
}

/// Aligns the previous stage to the current one and cross-attends.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub align: Linear,
    pub cross: CrossAttention,
}

impl Fusion {
    /// `prev: [B, 2H, 2W, C/2]` -> `[B, H, W, C]`.
    pub fn align(&self, tape: &mut Tape, p: &Bound, prev: Var) -> Result<Var> {
        let t = self.align.forward(tape, p, prev)?;
        let t = tape.permute(t, &[0, 3, 1, 2])?;
        let t = tape.avg_pool2d(t, 2)?;
        tape.permute(t, &[0, 2, 3, 1])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, current: Var, prev: Var) -> Result<Var> {
        let aligned = self.align(tape, p, prev)?;
        let s = tape.shape(current).to_vec();
        if tape.shape(aligned) != s.as_slice() {
            return Err(Error::dim("cross_scale_fuse", &s, tape.shape(aligned)));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let cur = tape.reshape(current, &[b, h * w, c])?;
        let prv = tape.reshape(aligned, &[b, h * w, c])?;
        let att = self.cross.attend_tokens(tape, p, cur, prv)?;
        let att = tape.reshape(att.out, &[b, h, w, c])?;
        tape.add(current, att)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<Block>,
    pub fusion: Option<Fusion>,
}

#[derive(Clone, Debug)]
struct Arch {
    predictor: Option<WindowPredictor>,
    embed: PatchEmbed,
    stages: Vec<Stage>,
    norm: LayerNorm,
    head: Linear,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Channels-last output of every stage.
    pub stages: Vec<Var>,
    pub mixtures: Vec<Option<StageMixture>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    arch: Arch,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, None)
    }

    /// Every parameter drawn from a truncated normal of `std`, including
    /// those normally initialized to zeros or ones.
    pub fn randomized(cfg: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        Self::build(cfg, seed, Some(std))
    }

    fn build(cfg: ModelConfig, seed: u64, randomize_all: Option<f64>) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, "init", 0);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
            randomize_all,
        };
        let tn = Init::TruncNormal(INIT_STD);
        let predictor = cfg
            .dynamic_window
            .then(|| WindowPredictor::build(&mut b, "predictor", cfg.in_channels, &cfg.candidate_windows));
        let c0 = cfg.stage_dim(0);
        let embed = PatchEmbed {
            proj: b.linear("patch_embed.proj", cfg.in_channels * cfg.patch_size * cfg.patch_size, c0, true, tn),
            norm: b.layer_norm("patch_embed.norm", c0),
            patch: cfg.patch_size,
        };
        let mut stages = Vec::with_capacity(cfg.num_stages());
        for i in 0..cfg.num_stages() {
            let c = cfg.stage_dim(i);
            let merge = (i >= 1).then(|| {
                let cp = cfg.stage_dim(i - 1);
                PatchMerge {
                    norm: b.layer_norm(&format!("stages.{i}.merge.norm"), 4 * cp),
                    reduction: b.linear(&format!("stages.{i}.merge.reduction"), 4 * cp, c, false, tn),
                }
            });
            let acfg = AttentionConfig::new(c, cfg.num_heads[i])?;
            let hidden = cfg.mlp_ratio * c;
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    let name = format!("stages.{i}.blocks.{j}");
                    Block {
                        norm1: b.layer_norm(&format!("{name}.norm1"), c),
                        attn: SelfAttention::build(&mut b, &format!("{name}.attn"), acfg),
                        norm2: b.layer_norm(&format!("{name}.norm2"), c),
                        fc1: b.linear(&format!("{name}.mlp.fc1"), c, hidden, true, tn),
                        fc2: b.linear(&format!("{name}.mlp.fc2"), hidden, c, true, Init::Zeros),
                        shifted: j % 2 == 1,
                    }
                })
                .collect();
            let fusion = cfg.fusion_at(i).then(|| Fusion {
                align: b.linear(&format!("stages.{i}.fuse.align"), cfg.stage_dim(i - 1), c, true, tn),
                cross: CrossAttention::build(&mut b, &format!("stages.{i}.fuse.cross"), acfg),
            });
            stages.push(Stage { merge, blocks, fusion });
        }
        let cl = cfg.final_dim();
        let norm = b.layer_norm("norm", cl);
        let head = b.linear("head", cl, cfg.num_classes, true, tn);
        Ok(Self {
            cfg,
            params,
            arch: Arch {
                predictor,
                embed,
                stages,
                norm,
                head,
            },
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.arch.stages
    }

    pub fn patch_embed(&self) -> &PatchEmbed {
        &self.arch.embed
    }

    /// Window configuration of stage `i` given the predicted scale field.
    fn stage_windows(&self, tape: &mut Tape, field: Option<&predictor::ScaleField>, i: usize) -> Result<StageWindows> {
        match field {
            None => Ok(StageWindows::Fixed(self.cfg.stage_fixed_window(i))),
            Some(f) => {
                let side = self.cfg.stage_side(i);
                let mut mixture = predictor::pool_to_stage(tape, f, (side, side))?;
                if self.cfg.selection == Selection::Hard {
                    mixture = predictor::harden(tape, mixture)?;
                }
                Ok(StageWindows::Mixed {
                    mixture,
                    candidates: self.cfg.stage_candidates(i),
                })
            }
        }
    }

    /// Merge (for `i ≥ 1`) followed by the blocks of stage `i`, on
    /// channels-last tokens.
    pub fn stage_forward(&self, tape: &mut Tape, p: &Bound, i: usize, x: Var, windows: &StageWindows) -> Result<Var> {
        let stage = &self.arch.stages[i];
        let mut x = match &stage.merge {
            Some(m) => m.forward(tape, p, x)?,
            None => x,
        };
        for block in &stage.blocks {
            x = block.forward(tape, p, x, windows)?;
        }
        Ok(x)
    }

    pub fn forward_detailed(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<ForwardOutput> {
        let s = tape.shape(x).to_vec();
        let want = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Config(format!(
                "input {s:?} does not match configured image [B, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        let field = match &self.arch.predictor {
            Some(pred) => Some(pred.forward(tape, p, x)?),
            None => None,
        };
        let mut h = self.arch.embed.forward(tape, p, x)?;
        let mut stages: Vec<Var> = Vec::with_capacity(self.arch.stages.len());
        let mut mixtures = Vec::with_capacity(self.arch.stages.len());
        for (i, stage) in self.arch.stages.iter().enumerate() {
            let windows = self.stage_windows(tape, field.as_ref(), i)?;
            mixtures.push(match &windows {
                StageWindows::Mixed { mixture, .. } => Some(*mixture),
                StageWindows::Fixed(_) => None,
            });
            h = self.stage_forward(tape, p, i, h, &windows)?;
            if let Some(f) = &stage.fusion {
                h = f.forward(tape, p, h, stages[i - 1])?;
            }
            stages.push(h);
        }
        let t = self.arch.norm.forward(tape, p, h)?;
        let ts = tape.shape(t).to_vec();
        let t = tape.reshape(t, &[ts[0], ts[1] * ts[2], ts[3]])?;
        let pooled = tape.mean_axis(t, 1)?;
        let logits = self.arch.head.forward(tape, p, pooled)?;
        Ok(ForwardOutput {
            logits,
            stages,
            mixtures,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(tape, p, x)?.logits)
    }

    /// Inference-only logits `[B, K]` for a batch of images.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }

    /// Class probabilities `[B, K]`.
    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        let logits = self.logits(images)?;
        let probs = crate::kernels::softmax_axis(logits.data(), logits.shape(), 1);
        Tensor::new(logits.shape(), probs)
    }
}
