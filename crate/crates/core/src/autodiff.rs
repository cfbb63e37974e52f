//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and enough
//! structure to replay its backward rule. Nodes are only ever appended, so an
//! op's inputs always precede it and `backward` is a single reverse sweep.
//!
//! There is no implicit broadcasting. Bias addition, per-sample scaling and
//! axis expansion are explicit ops; `matmul` broadcasts batch dimensions only.

use crate::error::{Error, Result};
use crate::kernels::{self, axis_split};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (a matrix index, b matrix index) per output matrix.
    pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    MulPerBatch { x: Var, w: Var },
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Expand { x: Var, axis: usize, n: usize },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, row_len: usize, index: Vec<Option<usize>> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Option<Vec<f64>> },
    AvgPool2d { x: Var, k: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::MulPerBatch { .. } => "mul_per_batch",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Expand { .. } => "expand",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::AvgPool2d { .. } => "avg_pool2d",
        }
    }
}

/// A recorded value. `requires_grad` is true for trainable leaves and for
/// every node downstream of one; `grad` is filled on leaves by `backward`.
#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape in checked mode: every op output is scanned for NaN/Inf.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
            backward_done: false,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]` with
    /// numpy-style broadcasting over the batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];

        let (out_batch, pairs, m_eff) = if bb.is_empty() {
            // Weight matrix: fold every batch row of `a` into one product.
            let rows: usize = ba.iter().product::<usize>() * m;
            (ba.to_vec(), vec![(0, 0)], rows)
        } else {
            let (batch, pairs) =
                broadcast_pairs(ba, bb).ok_or_else(|| Error::dim("matmul", &sa, &sb))?;
            (batch, pairs, m)
        };

        let mut out = vec![0.0; pairs.len() * m_eff * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for (o, &(ia, ib)) in pairs.iter().enumerate() {
                kernels::gemm_acc(
                    &ad[ia * m_eff * k..(ia + 1) * m_eff * k],
                    &bd[ib * k * n..(ib + 1) * k * n],
                    &mut out[o * m_eff * n..(o + 1) * m_eff * n],
                    m_eff,
                    k,
                    n,
                );
            }
        }
        let mut shape = out_batch;
        shape.push(m);
        shape.push(n);
        let plan = MatMulPlan {
            m: m_eff,
            k,
            n,
            pairs,
        };
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, plan }, &[a, b])
    }

    /// `x · w + b` over the last axis, with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// 1×1 convolution: `x: [B,C,H,W]`, `w: [S,C]`, `bias: [S]` -> `[B,S,H,W]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 2 || sx[1] != sw[1] || self.shape(bias) != [sw[0]] {
            return Err(Error::dim("conv1x1", &sx, &sw));
        }
        let (b, h, wd) = (sx[0], sx[2], sx[3]);
        let s = sw[0];
        let t = self.permute(x, &[0, 2, 3, 1])?;
        let wt = self.permute(w, &[1, 0])?;
        let y = self.linear(t, wt, Some(bias))?;
        let y = self.reshape(y, &[b, h, wd, s])?;
        self.permute(y, &[0, 3, 1, 2])
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, _| Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |_, _| Op::Div(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, op(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.map(x, |v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, kernels::gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect()).expect("same shape")
    }

    /// Adds `bias: [n]` to every length-`n` row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", &sx, self.shape(bias)));
        }
        let mut data = self.value(x).data().to_vec();
        let bd = self.value(bias).data();
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(bd) {
                *v += b;
            }
        }
        self.push(Tensor::new(sx, data)?, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Multiplies each leading-axis slice `x[b]` by the scalar `w[b]`.
    pub fn mul_per_batch(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if self.shape(w) != [sx[0]] {
            return Err(Error::dim("mul_per_batch", &sx, self.shape(w)));
        }
        let inner = self.value(x).numel() / sx[0];
        let mut data = self.value(x).data().to_vec();
        for (chunk, &s) in data.chunks_exact_mut(inner).zip(self.value(w).data()) {
            for v in chunk {
                *v *= s;
            }
        }
        self.push(Tensor::new(sx, data)?, Op::MulPerBatch { x, w }, &[x, w])
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| Error::dim("reshape", self.shape(x), shape))?;
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, format!("invalid permutation {perm:?}")));
        }
        let map = kernels::permute_map(&shape, perm);
        let src = self.value(x).data();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Inserts a new axis of extent `n` at position `axis`, repeating `x`.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(Error::shape("expand", &shape, format!("axis {axis}, extent {n}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.insert(axis, n);
        self.push(Tensor::new(out_shape, data)?, Op::Expand { x, axis, n }, &[x])
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("reduce", &shape, format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((out_shape, out))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce_axis(x, axis)?;
        self.push(Tensor::new(shape, data)?, Op::SumAxis { x, axis }, &[x])
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1) as f64;
        let (shape, mut data) = self.reduce_axis(x, axis)?;
        data.iter_mut().for_each(|v| *v /= len);
        self.push(Tensor::new(shape, data)?, Op::MeanAxis { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Spatial mean of `[B, C, H, W]` -> `[B, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("mean_pool", &s, "expected [B,C,H,W]"));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        self.mean_axis(flat, 2)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                &shape,
                format!("axis {axis} range {start}..{}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::new(out_shape, data)?, Op::Slice { x, axis, start }, &[x])
    }

    /// Row gather: views `x` as rows of `row_len` values and builds an output
    /// whose `i`-th row is `x[index[i]]`, or zeros for `None`.
    pub fn gather_rows(
        &mut self,
        x: Var,
        row_len: usize,
        index: Vec<Option<usize>>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let numel = self.value(x).numel();
        if row_len == 0 || numel % row_len != 0 {
            return Err(Error::shape("gather_rows", self.shape(x), format!("row length {row_len}")));
        }
        let rows = numel / row_len;
        if out_shape.iter().product::<usize>() != index.len() * row_len {
            return Err(Error::shape("gather_rows", out_shape, "output size != rows * row_len"));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; index.len() * row_len];
        for (dst, idx) in data.chunks_exact_mut(row_len).zip(&index) {
            if let Some(r) = *idx {
                if r >= rows {
                    return Err(Error::Index {
                        op: "gather_rows",
                        index: r,
                        bound: rows,
                    });
                }
                dst.copy_from_slice(&src[r * row_len..(r + 1) * row_len]);
            }
        }
        self.push(
            Tensor::new(out_shape, data)?,
            Op::GatherRows { x, row_len, index },
            &[x],
        )
    }

    /// Average pooling with a square `k×k` window and stride `k` over `[B,C,H,W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::shape("avg_pool2d", &s, format!("pool factor {k}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let planes = s[0] * s[1];
        let norm = (k * k) as f64;
        let mut data = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for i in 0..h {
                for j in 0..w {
                    data[p * ho * wo + (i / k) * wo + j / k] += src[p * h * w + i * w + j];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= norm);
        self.push(
            Tensor::new([s[0], s[1], ho, wo], data)?,
            Op::AvgPool2d { x, k },
            &[x],
        )
    }

    // ---------------------------------------------------------------- normalization

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, format!("axis {axis} out of range")));
        }
        let data = kernels::softmax_axis(self.value(x).data(), &shape, axis);
        self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("log_softmax", &shape, format!("axis {axis} out of range")));
        }
        let data = kernels::log_softmax_axis(self.value(x).data(), &shape, axis);
        self.push(Tensor::new(shape, data)?, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Divides by the sum along `axis` so slices sum to one.
    pub fn normalize_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x)[axis];
        let total = self.sum_axis(x, axis)?;
        let total = self.expand(total, axis, n)?;
        let total = self.reshape(total, &self.shape(x).to_vec())?;
        self.div(x, total)
    }

    /// Normalizes over the last axis, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let (mean, rstd) = moments(row, eps);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[i] + b[i];
            }
        }
        self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// `loss = -(1/N) Σᵢ wᵢ · log p[i, targets[i]]` with `wᵢ = 1` when no
    /// weights are supplied.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(w) = weights {
            if w.len() != targets.len() {
                return Err(Error::dim("cross_entropy", &[targets.len()], &[w.len()]));
            }
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let logp = kernels::log_softmax_axis(self.value(logits).data(), &shape, 1);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            total -= w * logp[i * c + t];
        }
        let loss = total / n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
            },
            &[logits],
        )
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` on every trainable leaf.
    ///
    /// Fails if gradients from an earlier call are still present; use
    /// [`Tape::backward_accumulate`] or [`Tape::zero_grad`] for that.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without zero_grad; use backward_accumulate".into(),
            ));
        }
        self.run_backward(loss)
    }

    /// Like [`Tape::backward`], but adds into existing leaf gradients.
    pub fn backward_accumulate(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn run_backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract(
                "loss does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(existing) => existing
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(e, v)| *e += v),
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let MatMulPlan { m, k, n, pairs } = plan;
                let (m, k, n) = (*m, *k, *n);
                acc(*a, &mut |ga| {
                    for (o, &(ia, ib)) in pairs.iter().enumerate() {
                        kernels::gemm_nt_acc(
                            &g[o * m * n..(o + 1) * m * n],
                            &bd[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for (o, &(ia, ib)) in pairs.iter().enumerate() {
                        kernels::gemm_tn_acc(
                            &ad[ia * m * k..(ia + 1) * m * k],
                            &g[o * m * n..(o + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bd = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * out[i] / bd[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * s)),
            Op::AddBias { x, bias } => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulPerBatch { x, w } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let inner = xd.len() / wd.len();
                acc(*x, &mut |gx| {
                    for (bi, &s) in wd.iter().enumerate() {
                        for i in bi * inner..(bi + 1) * inner {
                            gx[i] += g[i] * s;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (bi, d) in gw.iter_mut().enumerate() {
                        let r = bi * inner..(bi + 1) * inner;
                        *d += g[r.clone()].iter().zip(&xd[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xd[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Permute { x, perm } => {
                let map = kernels::permute_map(self.shape(*x), perm);
                acc(*x, &mut |gx| {
                    for (o, &i) in map.iter().enumerate() {
                        gx[i] += g[o];
                    }
                });
            }
            Op::Expand { x, axis, n } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for r in 0..*n {
                            let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                            add_into(&mut gx[o * inner..(o + 1) * inner], src);
                        }
                    }
                });
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let scale = match node.op {
                    Op::MeanAxis { .. } => 1.0 / len as f64,
                    _ => 1.0,
                };
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for i in 0..len {
                            let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v * scale);
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    acc(x, &mut |gx| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gx[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::GatherRows { x, row_len, index } => {
                acc(*x, &mut |gx| {
                    for (src, idx) in g.chunks_exact(*row_len).zip(index) {
                        if let Some(r) = *idx {
                            add_into(&mut gx[r * row_len..(r + 1) * row_len], src);
                        }
                    }
                });
            }
            Op::AvgPool2d { x, k } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let planes = s[0] * s[1];
                let norm = (k * k) as f64;
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        for i in 0..h {
                            for j in 0..w {
                                gx[p * h * w + i * w + j] += g[p * ho * wo + (i / k) * wo + j / k] / norm;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let dot: f64 = (0..len).map(|i| g[base + i * inner] * out[base + i * inner]).sum();
                            for i in 0..len {
                                let p = base + i * inner;
                                gx[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let total: f64 = (0..len).map(|i| g[base + i * inner]).sum();
                            for i in 0..len {
                                let p = base + i * inner;
                                gx[p] += g[p] - out[p].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let n = gd.len();
                let mut xhat = vec![0.0; xd.len()];
                let mut rstds = Vec::with_capacity(xd.len() / n);
                for (row, xh) in xd.chunks_exact(n).zip(xhat.chunks_exact_mut(n)) {
                    let (mean, rstd) = moments(row, *eps);
                    for (o, v) in xh.iter_mut().zip(row) {
                        *o = (v - mean) * rstd;
                    }
                    rstds.push(rstd);
                }
                acc(*gamma, &mut |gg| {
                    for (gr, xr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for i in 0..n {
                            gg[i] += gr[i] * xr[i];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, ((gr, xr), dst)) in g
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in 0..n {
                            let d = gr[i] * gd[i];
                            mean_d += d;
                            mean_dx += d * xr[i];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for i in 0..n {
                            let d = gr[i] * gd[i];
                            dst[i] += rstds[r] * (d - mean_d - xr[i] * mean_dx);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let shape = self.shape(*logits);
                let (n, c) = (shape[0], shape[1]);
                let p = kernels::softmax_axis(self.value(*logits).data(), shape, 1);
                acc(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        let s = g[0] * w / n as f64;
                        for j in 0..c {
                            let y = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (p[i * c + j] - y);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Mean and reciprocal standard deviation (biased variance).
fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Broadcasts two batch shapes; returns the output batch shape and, per
/// output matrix, the source matrix indices in `a` and `b`.
fn broadcast_pairs(ba: &[usize], bb: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let rank = ba.len().max(bb.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(ba), pad(bb));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return None;
        }
        out.push(x.max(y));
    }
    let strides = |p: &[usize]| {
        let mut st = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if p[d] == 1 { 0 } else { acc };
            acc *= p[d];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total: usize = out.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        let ia = counter.iter().zip(&sa).map(|(c, s)| c * s).sum();
        let ib = counter.iter().zip(&sb).map(|(c, s)| c * s).sum();
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Some((out, pairs))
}
