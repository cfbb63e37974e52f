//! Window-partitioned multi-head self-attention and multi-head
//! cross-attention.
//!
//! Feature maps enter this module either as `[B, C, H, W]` (public
//! partition/reverse and cross-attention) or as channels-last tokens
//! `[B, H, W, C]` (the hot path inside transformer blocks).
//!
//! A window partition pads `H` and `W` with zero tokens up to multiples of
//! the window size, rolls the padded map by `(-shift, -shift)` and cuts it
//! into `w × w` windows. Padded tokens are masked out as keys; tokens that
//! only became neighbours through the cyclic roll are masked from each
//! other.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Init, Linear, INIT_STD};
use crate::tensor::Tensor;

/// Additive logit for disallowed attention pairs.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || dim == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} not divisible by {num_heads} heads"
            )));
        }
        Ok(Self { dim, num_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(window: usize, shift: usize) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(Error::Config(format!(
                "invalid window spec: size {window}, shift {shift}"
            )));
        }
        Ok(Self { window, shift })
    }

    pub fn unshifted(window: usize) -> Result<Self> {
        Self::new(window, 0)
    }
}

/// Index bookkeeping for partitioning one `[B, H, W]` token grid.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub spec: WindowSpec,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl WindowLayout {
    pub fn new(batch: usize, height: usize, width: usize, spec: WindowSpec) -> Result<Self> {
        let w = spec.window;
        if w > height || w > width {
            return Err(Error::Config(format!(
                "window {w} larger than feature map {height}x{width}"
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            spec,
            padded_h: height.div_ceil(w) * w,
            padded_w: width.div_ceil(w) * w,
        })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded_h / self.spec.window) * (self.padded_w / self.spec.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.spec.window * self.spec.window
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    pub fn is_padded(&self) -> bool {
        self.padded_h != self.height || self.padded_w != self.width
    }

    /// Padded-map coordinates that land at window `win`, position `pos`.
    fn source_coords(&self, win: usize, pos: usize) -> (usize, usize) {
        let w = self.spec.window;
        let per_row = self.padded_w / w;
        let (wi, wj) = (win / per_row, win % per_row);
        let (pi, pj) = (pos / w, pos % w);
        let y = (wi * w + pi + self.spec.shift) % self.padded_h;
        let x = (wj * w + pj + self.spec.shift) % self.padded_w;
        (y, x)
    }

    /// For each window-token row, the `[B·H·W]` token row it reads from
    /// (`None` for padding).
    pub fn partition_index(&self) -> Vec<Option<usize>> {
        let nw = self.windows_per_image();
        let l = self.tokens_per_window();
        let mut index = Vec::with_capacity(self.batch * nw * l);
        for b in 0..self.batch {
            for win in 0..nw {
                for pos in 0..l {
                    let (y, x) = self.source_coords(win, pos);
                    index.push((y < self.height && x < self.width).then(|| {
                        b * self.height * self.width + y * self.width + x
                    }));
                }
            }
        }
        index
    }

    /// Inverse of [`WindowLayout::partition_index`] over real tokens.
    pub fn reverse_index(&self) -> Vec<Option<usize>> {
        let mut index = vec![None; self.batch * self.height * self.width];
        for (row, src) in self.partition_index().into_iter().enumerate() {
            if let Some(s) = src {
                index[s] = Some(row);
            }
        }
        index
    }

    /// Additive mask `[windows_per_image, L, L]`, or `None` when every pair
    /// is allowed.
    pub fn mask(&self) -> Option<Tensor> {
        let (w, s) = (self.spec.window, self.spec.shift);
        if s == 0 && !self.is_padded() {
            return None;
        }
        let nw = self.windows_per_image();
        let l = self.tokens_per_window();
        let per_row = self.padded_w / w;
        let region = |rolled: usize, extent: usize| -> usize {
            if s == 0 || rolled < extent - w {
                0
            } else if rolled < extent - s {
                1
            } else {
                2
            }
        };
        let mut data = vec![0.0; nw * l * l];
        for win in 0..nw {
            let (wi, wj) = (win / per_row, win % per_row);
            let mut labels = Vec::with_capacity(l);
            let mut real = Vec::with_capacity(l);
            for pos in 0..l {
                let (ry, rx) = (wi * w + pos / w, wj * w + pos % w);
                labels.push(region(ry, self.padded_h) * 3 + region(rx, self.padded_w));
                let (y, x) = self.source_coords(win, pos);
                real.push(y < self.height && x < self.width);
            }
            for i in 0..l {
                for j in 0..l {
                    if labels[i] != labels[j] || !real[j] {
                        data[(win * l + i) * l + j] = MASK_VALUE;
                    }
                }
            }
        }
        Some(Tensor::new([nw, l, l], data).expect("mask shape"))
    }
}

/// Splits channels-last tokens `[B, H, W, C]` into `[B·nW, w·w, C]`.
pub fn partition_tokens(tape: &mut Tape, x: Var, layout: &WindowLayout) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[0] != layout.batch || s[1] != layout.height || s[2] != layout.width {
        return Err(Error::shape("window_partition", &s, "expected [B, H, W, C] matching layout"));
    }
    let c = s[3];
    let out = [layout.num_windows(), layout.tokens_per_window(), c];
    tape.gather_rows(x, c, layout.partition_index(), &out)
}

/// Inverse of [`partition_tokens`]: `[B·nW, w·w, C]` back to `[B, H, W, C]`.
pub fn reverse_tokens(tape: &mut Tape, windows: Var, layout: &WindowLayout) -> Result<Var> {
    let s = tape.shape(windows).to_vec();
    if s.len() != 3 || s[0] != layout.num_windows() || s[1] != layout.tokens_per_window() {
        return Err(Error::shape("window_reverse", &s, "windows do not match layout"));
    }
    let c = s[2];
    let out = [layout.batch, layout.height, layout.width, c];
    tape.gather_rows(windows, c, layout.reverse_index(), &out)
}

/// `[B, C, H, W]` -> `[B·nW, w·w, C]`.
pub fn window_partition(tape: &mut Tape, x: Var, spec: WindowSpec) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("window_partition", &s, "expected [B, C, H, W]"));
    }
    let layout = WindowLayout::new(s[0], s[2], s[3], spec)?;
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    partition_tokens(tape, t, &layout)
}

/// `[B·nW, w·w, C]` -> `[B, C, H, W]` for the given original shape.
pub fn window_reverse(tape: &mut Tape, windows: Var, spec: WindowSpec, orig_shape: &[usize]) -> Result<Var> {
    if orig_shape.len() != 4 {
        return Err(Error::shape("window_reverse", orig_shape, "expected [B, C, H, W]"));
    }
    let s = tape.shape(windows);
    if s.len() != 3 || s[2] != orig_shape[1] {
        return Err(Error::dim("window_reverse", s, orig_shape));
    }
    let layout = WindowLayout::new(orig_shape[0], orig_shape[2], orig_shape[3], spec)?;
    let t = reverse_tokens(tape, windows, &layout)?;
    tape.permute(t, &[0, 3, 1, 2])
}

/// Result of one attention call: projected output and the per-head
/// attention weights `[Nb, heads, Lq, Lk]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

/// Scaled dot-product attention over per-head tensors `q: [Nb, h, Lq, d]`,
/// `k, v: [Nb, h, Lk, d]`. `mask` must be `[Nb, h, Lq, Lk]`.
pub fn scaled_dot_product(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Tensor>,
) -> Result<AttentionOutput> {
    let d = *tape.shape(q).last().unwrap();
    let q = tape.scale(q, 1.0 / (d as f64).sqrt())?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let mut scores = tape.matmul(q, kt)?;
    if let Some(m) = mask {
        if m.shape() != tape.shape(scores) {
            return Err(Error::dim("attention mask", m.shape(), tape.shape(scores)));
        }
        let m = tape.constant(m);
        scores = tape.add(scores, m)?;
    }
    let weights = tape.softmax(scores, 3)?;
    let out = tape.matmul(weights, v)?;
    Ok(AttentionOutput { out, weights })
}

/// `[Nb, L, h·d]` -> `[Nb, h, L, d]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (nb, l, c) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[nb, l, heads, c / heads])?;
    tape.permute(x, &[0, 2, 1, 3])
}

/// `[Nb, h, L, d]` -> `[Nb, L, h·d]`.
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (nb, h, l, d) = (s[0], s[1], s[2], s[3]);
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[nb, l, h * d])
}

/// Repeats a per-window `[nW, L, L]` mask over batch and heads.
fn expand_window_mask(mask: &Tensor, batch: usize, heads: usize) -> Tensor {
    let per_window = mask.shape()[1] * mask.shape()[2];
    let nw = mask.shape()[0];
    let mut data = Vec::with_capacity(batch * nw * heads * per_window);
    for _ in 0..batch {
        for w in 0..nw {
            let m = &mask.data()[w * per_window..(w + 1) * per_window];
            for _ in 0..heads {
                data.extend_from_slice(m);
            }
        }
    }
    Tensor::new([batch * nw, heads, mask.shape()[1], mask.shape()[2]], data).expect("mask shape")
}

/// Multi-head self-attention with fused QKV and an output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub cfg: AttentionConfig,
    pub qkv: Linear,
    pub proj: Linear,
}

impl SelfAttention {
    /// The output projection starts at zero so a residual branch begins as
    /// the identity.
    pub fn build(b: &mut Builder<'_>, name: &str, cfg: AttentionConfig) -> Self {
        let c = cfg.dim;
        Self {
            cfg,
            qkv: b.linear(&format!("{name}.qkv"), c, 3 * c, true, Init::TruncNormal(INIT_STD)),
            proj: b.linear(&format!("{name}.proj"), c, c, true, Init::Zeros),
        }
    }

    /// Plain token self-attention on `[Nb, L, C]` with an optional `[L, L]`
    /// additive mask shared by every sequence and head.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: Var, mask: Option<&Tensor>) -> Result<AttentionOutput> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.cfg.dim {
            return Err(Error::dim("mhsa", &s, &[self.cfg.dim]));
        }
        let (nb, l) = (s[0], s[1]);
        let mask = match mask {
            Some(m) if m.shape() != [l, l] => return Err(Error::dim("mhsa mask", m.shape(), &[l, l])),
            Some(m) => {
                let m3 = m.reshaped([1, l, l])?;
                Some(expand_window_mask(&m3, nb, self.cfg.num_heads))
            }
            None => None,
        };
        let qkv = self.qkv.forward(tape, p, tokens)?;
        let heads = self.attend_packed(tape, qkv, mask)?;
        let out = self.proj.forward(tape, p, heads.out)?;
        Ok(AttentionOutput { out, weights: heads.weights })
    }

    /// Attention on already projected `[Nb, L, 3C]` tokens, returning the
    /// merged heads `[Nb, L, C]` before the output projection.
    pub fn attend_packed(&self, tape: &mut Tape, qkv: Var, mask: Option<Tensor>) -> Result<AttentionOutput> {
        let c = self.cfg.dim;
        let h = self.cfg.num_heads;
        let q = tape.slice(qkv, 2, 0, c)?;
        let k = tape.slice(qkv, 2, c, c)?;
        let v = tape.slice(qkv, 2, 2 * c, c)?;
        let q = split_heads(tape, q, h)?;
        let k = split_heads(tape, k, h)?;
        let v = split_heads(tape, v, h)?;
        let att = scaled_dot_product(tape, q, k, v, mask)?;
        let out = merge_heads(tape, att.out)?;
        Ok(AttentionOutput { out, weights: att.weights })
    }

    /// Windowed attention heads over a projected QKV map `[B, H, W, 3C]`,
    /// returned as `[B, H, W, C]` before the output projection.
    pub fn window_heads(&self, tape: &mut Tape, qkv_map: Var, spec: WindowSpec) -> Result<AttentionOutput> {
        let s = tape.shape(qkv_map).to_vec();
        let layout = WindowLayout::new(s[0], s[1], s[2], spec)?;
        let windows = partition_tokens(tape, qkv_map, &layout)?;
        let mask = layout
            .mask()
            .map(|m| expand_window_mask(&m, layout.batch, self.cfg.num_heads));
        let att = self.attend_packed(tape, windows, mask)?;
        let out = reverse_tokens(tape, att.out, &layout)?;
        Ok(AttentionOutput { out, weights: att.weights })
    }

    /// Shifted-window self-attention on channels-last tokens `[B, H, W, C]`.
    pub fn window_forward(&self, tape: &mut Tape, p: &Bound, x: Var, spec: WindowSpec) -> Result<Var> {
        let qkv = self.qkv.forward(tape, p, x)?;
        let heads = self.window_heads(tape, qkv, spec)?;
        self.proj.forward(tape, p, heads.out)
    }
}

/// Multi-head attention with queries from the current map and keys/values
/// from a second map of identical shape; the result is added back onto the
/// current map.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
}

impl CrossAttention {
    pub fn build(b: &mut Builder<'_>, name: &str, cfg: AttentionConfig) -> Self {
        let c = cfg.dim;
        Self {
            cfg,
            q: b.linear(&format!("{name}.q"), c, c, true, Init::TruncNormal(INIT_STD)),
            kv: b.linear(&format!("{name}.kv"), c, 2 * c, true, Init::TruncNormal(INIT_STD)),
            proj: b.linear(&format!("{name}.proj"), c, c, true, Init::Zeros),
        }
    }

    /// Attended term for token sequences `current, prev: [B, L, C]`.
    pub fn attend_tokens(&self, tape: &mut Tape, p: &Bound, current: Var, prev: Var) -> Result<AttentionOutput> {
        let s = tape.shape(current).to_vec();
        if s.len() != 3 || tape.shape(prev) != s.as_slice() || s[2] != self.cfg.dim {
            return Err(Error::dim("cross_attention", &s, tape.shape(prev)));
        }
        let c = s[2];
        let q = self.q.forward(tape, p, current)?;
        let kv = self.kv.forward(tape, p, prev)?;
        let k = tape.slice(kv, 2, 0, c)?;
        let v = tape.slice(kv, 2, c, c)?;
        let heads = self.cfg.num_heads;
        let q = split_heads(tape, q, heads)?;
        let k = split_heads(tape, k, heads)?;
        let v = split_heads(tape, v, heads)?;
        let att = scaled_dot_product(tape, q, k, v, None)?;
        let merged = merge_heads(tape, att.out)?;
        let out = self.proj.forward(tape, p, merged)?;
        Ok(AttentionOutput { out, weights: att.weights })
    }

    /// Attended term only, `[B, C, H, W]`, with attention weights.
    pub fn attended(&self, tape: &mut Tape, p: &Bound, current: Var, prev: Var) -> Result<AttentionOutput> {
        let s = tape.shape(current).to_vec();
        if s.len() != 4 || tape.shape(prev) != s.as_slice() {
            return Err(Error::dim("cross_attention", &s, tape.shape(prev)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let flatten = |tape: &mut Tape, x: Var| -> Result<Var> {
            let t = tape.permute(x, &[0, 2, 3, 1])?;
            tape.reshape(t, &[b, h * w, c])
        };
        let cur = flatten(tape, current)?;
        let prv = flatten(tape, prev)?;
        let att = self.attend_tokens(tape, p, cur, prv)?;
        let out = tape.reshape(att.out, &[b, h, w, c])?;
        let out = tape.permute(out, &[0, 3, 1, 2])?;
        Ok(AttentionOutput { out, weights: att.weights })
    }

    /// `current + attended(current, prev)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, current: Var, prev: Var) -> Result<Var> {
        let att = self.attended(tape, p, current, prev)?;
        tape.add(current, att.out)
    }
}
