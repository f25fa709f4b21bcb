use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{AutodiffError, Tensor};

/// RMS normalization epsilon.
pub const RMS_EPS: f32 = 1e-5;

/// Fill value for masked attention scores. Finite so that forward outputs stay
/// finite; `exp(MASK_FILL - max)` underflows to exactly zero.
pub const MASK_FILL: f32 = -1e9;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Silu(Var),
    LogSigmoid(Var),
    Sum(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalMask(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        base: f32,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        scale: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; [`Tape::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rope_angles(dh: usize, base: f32, pos: usize, out: &mut Vec<(f32, f32)>) {
    out.clear();
    for i in 0..dh / 2 {
        let freq = (base as f64).powf(-(2.0 * i as f64) / dh as f64);
        let theta = pos as f64 * freq;
        out.push((theta.cos() as f32, theta.sin() as f32));
    }
}

/// Applies the rotary rotation (or its inverse when `inverse`) in place on a
/// `[T, n_heads * dh]` buffer, positions starting at `pos_offset`.
pub(crate) fn rope_rotate(
    data: &mut [f32],
    d: usize,
    n_heads: usize,
    base: f32,
    pos_offset: usize,
    inverse: bool,
) {
    let dh = d / n_heads;
    let rows = data.len() / d;
    let mut angles = Vec::with_capacity(dh / 2);
    for t in 0..rows {
        rope_angles(dh, base, pos_offset + t, &mut angles);
        let row = &mut data[t * d..(t + 1) * d];
        for h in 0..n_heads {
            for (i, &(c, s)) in angles.iter().enumerate() {
                let j = h * dh + 2 * i;
                let (x0, x1) = (row[j], row[j + 1]);
                if inverse {
                    row[j] = x0 * c + x1 * s;
                    row[j + 1] = -x0 * s + x1 * c;
                } else {
                    row[j] = x0 * c - x1 * s;
                    row[j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(data: &mut [f32], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise log-softmax, accumulated in f64 for scoring.
pub fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Re-arms a consumed tape so `backward` may be called again.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let av = self.value(a);
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("same length")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let t = self.map(a, |x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    /// `log σ(x)`, evaluated stably for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.min(0.0) - (-x.abs()).exp().ln_1p());
        let rg = self.rg(a);
        self.push(t, Op::LogSigmoid(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let cols = av.cols();
        if av.shape().len() != 2 || start + len > cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols { x: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or(AutodiffError::EmptyInput("concat_cols"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), pv));
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Replaces entries above the diagonal of a square score matrix with
    /// [`MASK_FILL`].
    pub fn causal_mask(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.rows() != av.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "causal_mask",
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let n = av.cols();
        let mut t = av.clone();
        for i in 0..n {
            for j in i + 1..n {
                t.data_mut()[i * n + j] = MASK_FILL;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::CausalMask(a), rg))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let cols = t.cols();
        if cols > 0 {
            softmax_rows(t.data_mut(), cols);
        }
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var, AutodiffError> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.len() != d {
            return Err(shape_err("rmsnorm", xv, gv));
        }
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<f32>() / d as f32;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for (v, &g) in row.iter_mut().zip(gv.data()) {
                *v *= r * g;
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(shape_err("embedding", tv, tv));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::IndexOutOfRange {
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotary position encoding over a `[T, n_heads * dh]` tensor; `dh` must be even.
    pub fn rope(&mut self, x: Var, n_heads: usize, base: f32) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let d = xv.cols();
        if xv.shape().len() != 2
            || n_heads == 0
            || !d.is_multiple_of(n_heads)
            || !(d / n_heads).is_multiple_of(2)
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "rope",
                left: xv.shape().to_vec(),
                right: vec![n_heads],
            });
        }
        let mut t = xv.clone();
        rope_rotate(t.data_mut(), d, n_heads, base, 0, false);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Rope { x, n_heads, base }, rg))
    }

    /// Token-level negative log-likelihood over unmasked rows of `[T, V]` logits.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        let (t_len, v) = (lv.rows(), lv.cols());
        if targets.len() != t_len || mask.len() != t_len {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::AllMasked);
        }
        let mut total = 0.0f64;
        for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if target >= v {
                return Err(AutodiffError::TargetOutOfRange { target, vocab: v });
            }
            total -= log_softmax_row(lv.row(t))[target];
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f32,
            Reduction::Sum => 1.0,
        };
        let value = (total * scale as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) back to every `requires_grad` leaf.
    ///
    /// Leaves that do not influence `loss` receive a zero gradient. The tape is
    /// marked consumed; a second call fails until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let lv = self
            .nodes
            .get(loss.0)
            .ok_or(AutodiffError::UnknownVar(loss.0))?;
        if lv.value.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut Tensor)| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &|s| {
                    matmul_nt_acc(g.data(), bv.data(), s.data_mut(), m, n, k)
                });
                acc(*b, &|s| {
                    matmul_tn_acc(av.data(), g.data(), s.data_mut(), m, k, n)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| {
                    for (x, &y) in s.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|s| {
                    for ((x, &gy), &y) in s.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gy * y;
                    }
                });
                acc(*b, &|s| {
                    for ((x, &gy), &y) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gy * y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| {
                for (x, &gy) in s.data_mut().iter_mut().zip(g.data()) {
                    *x += gy * c;
                }
            }),
            Op::AddScalar(a) => acc(*a, &|s| s.add_assign(g)),
            Op::Silu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &|s| {
                    for ((x, &gy), &z) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        let sg = sigmoid(z);
                        *x += gy * sg * (1.0 + z * (1.0 - sg));
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &|s| {
                    for ((x, &gy), &z) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gy * sigmoid(-z);
                    }
                });
            }
            Op::Sum(a) => {
                let gy = g.data()[0];
                acc(*a, &|s| {
                    for x in s.data_mut() {
                        *x += gy;
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                acc(*a, &|s| {
                    let sd = s.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            sd[i * n + j] += g.data()[j * m + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                acc(*x, &|s| {
                    let cols = s.cols();
                    let sd = s.data_mut();
                    for r in 0..g.rows() {
                        for c in 0..len {
                            sd[r * cols + start + c] += g.data()[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &|s| {
                        let sd = s.data_mut();
                        for r in 0..g.rows() {
                            for c in 0..w {
                                sd[r * w + c] += g.data()[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::CausalMask(a) => {
                let n = out.cols();
                acc(*a, &|s| {
                    let sd = s.data_mut();
                    for i in 0..n {
                        for j in 0..=i {
                            sd[i * n + j] += g.data()[i * n + j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                acc(*a, &|s| {
                    let sd = s.data_mut();
                    for ((srow, grow), yrow) in sd
                        .chunks_mut(cols)
                        .zip(g.data().chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((x, &gy), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gy - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
                let d = xv.cols();
                acc(*x, &|s| {
                    let sd = s.data_mut();
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &xv.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot: f32 = (0..d).map(|j| gr[j] * gv.data()[j] * xr[j]).sum();
                        let coef = ir * ir * ir * dot / d as f32;
                        for j in 0..d {
                            sd[r * d + j] += ir * gv.data()[j] * gr[j] - xr[j] * coef;
                        }
                    }
                });
                acc(*gain, &|s| {
                    let sd = s.data_mut();
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for (j, v) in sd.iter_mut().enumerate().take(d) {
                            *v += g.data()[r * d + j] * xv.data()[r * d + j] * ir;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                acc(*table, &|s| {
                    let sd = s.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            sd[id * d + c] += g.data()[r * d + c];
                        }
                    }
                });
            }
            Op::Rope { x, n_heads, base } => {
                let mut back = g.clone();
                let d = back.cols();
                rope_rotate(back.data_mut(), d, *n_heads, *base, 0, true);
                acc(*x, &|s| s.add_assign(&back));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                scale,
            } => {
                let lv = &nodes[logits.0].value;
                let v = lv.cols();
                let gy = g.data()[0] * scale;
                acc(*logits, &|s| {
                    let sd = s.data_mut();
                    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let mut p = lv.row(t).to_vec();
                        softmax_rows(&mut p, v);
                        for (c, pc) in p.iter().enumerate() {
                            let onehot = if c == target { 1.0 } else { 0.0 };
                            sd[t * v + c] += gy * (pc - onehot);
                        }
                    }
                });
            }
        }
    }
}
