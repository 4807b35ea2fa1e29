//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records primitive operations in execution order, so node ids
//! are already a topological order. [`Graph::backward`] walks the tape once in
//! reverse. Nodes that do not depend on any trainable leaf are never visited,
//! and weight gradients are not computed for frozen inputs.
//!
//! Leaves may borrow their tensors (`leaf`, `constant`) so that binding the
//! model parameters into a per-sample graph does not copy them.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, transpose_into, Tensor};

/// GELU tanh-approximation coefficient sqrt(2/pi).
pub const GELU_C: f64 = 0.7978845608;
/// GELU tanh-approximation cubic coefficient.
pub const GELU_K: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    MatMulNT,
    Transpose,
    Add,
    Mul,
    AddBias,
    Scale(f64),
    Relu,
    Gelu,
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { outer: usize, len: usize, inner: usize },
    Attention { heads: usize, probs: Vec<f64> },
    CrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    Sum,
    AssembleTokens,
    SelectRow(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::MatMulNT => "matmul_nt",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
            Op::AssembleTokens => "assemble_tokens",
            Op::SelectRow(_) => "select_row",
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    data: Cow<'a, [f64]>,
    op: Op,
    inputs: Vec<VarId>,
    requires_grad: bool,
}

/// Summary of one backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    pub visited: usize,
    pub recorded: usize,
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Cow<'a, [f64]>, op: Op, inputs: Vec<VarId>) -> VarId {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            inputs,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Cow<'a, [f64]>, requires_grad: bool) -> VarId {
        let id = self.push(shape, data, Op::Leaf, Vec::new());
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    /// Borrowed leaf; tracks gradients iff the tensor does.
    pub fn leaf(&mut self, t: &'a Tensor) -> VarId {
        self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), t.requires_grad())
    }

    /// Borrowed leaf that never tracks gradients.
    pub fn constant(&mut self, t: &'a Tensor) -> VarId {
        self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), false)
    }

    /// Owned leaf; tracks gradients iff the tensor does.
    pub fn input(&mut self, t: Tensor) -> VarId {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), rg)
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: VarId) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: VarId) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.to_vec()).expect("node shapes are valid")
    }

    pub fn requires_grad(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the most recent backward pass, if the node received one.
    pub fn grad(&self, v: VarId) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: VarId) -> Option<Tensor> {
        let g = self.grad(v)?;
        Tensor::new(self.shape(v), g.to_vec()).ok()
    }

    /// Saved attention probabilities `[heads, T, T]` of an attention node.
    pub fn attention_probs(&self, v: VarId) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs } => {
                let t = self.nodes[v.0].shape[0];
                Tensor::new(&[*heads, t, t], probs.clone()).ok()
            }
            _ => None,
        }
    }

    fn dims2(&self, v: VarId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                shape: s.to_vec(),
                reason: format!("{op} expects a 2-D operand"),
            }),
        }
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul, vec![a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.data(a), self.data(b), &mut out);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMulNT, vec![a, b]))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let (r, c) = self.dims2(a, "transpose")?;
        let mut out = vec![0.0; r * c];
        transpose_into(r, c, self.data(a), &mut out);
        Ok(self.push(vec![c, r], Cow::Owned(out), Op::Transpose, vec![a]))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add, vec![a, b]))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul, vec![a, b]))
    }

    /// Adds a row-vector bias (`[n]` or `[1, n]`) to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.data(bias).len() != n || self.shape(bias).iter().rev().skip(1).any(|&d| d != 1) {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::AddBias, vec![x, bias]))
    }

    pub fn scale(&mut self, x: VarId, s: f64) -> VarId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale(s), vec![x])
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Relu, vec![x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Gelu, vec![x])
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    /// `eps` is added to the variance inside the square root.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.data(gamma).len() != n || self.data(beta).len() != n {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.data(x).len() / n;
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                // A zero-variance row with eps = 0 has no defined normalization;
                // map it to zero rather than NaN.
                let h = if rs.is_finite() { (row[j] - mean) * rs } else { 0.0 };
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        for r in rstd.iter_mut() {
            if !r.is_finite() {
                *r = 0.0;
            }
        }
        Ok(self.push(shape, Cow::Owned(out), Op::LayerNorm { xhat, rstd }, vec![x, gamma, beta]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.data(x);
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xs[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xs[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { outer, len, inner }, vec![x]))
    }

    /// Multi-head scaled dot-product attention on `[T, d]` projections.
    ///
    /// Head `h` uses columns `h*d/heads .. (h+1)*d/heads` of `q`, `k`, `v`;
    /// logits are scaled by `1/sqrt(d/heads)` and the per-head outputs are
    /// concatenated back into `[T, d]`. Probabilities are retained and can be
    /// read with [`Graph::attention_probs`].
    pub fn attention(&mut self, q: VarId, k: VarId, v: VarId, heads: usize) -> Result<VarId> {
        let (t, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; t * d];
        let mut probs = vec![0.0; heads * t * t];
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut qh = vec![0.0; t * hd];
        let mut kh = vec![0.0; t * hd];
        let mut vh = vec![0.0; t * hd];
        let mut oh = vec![0.0; t * hd];
        for h in 0..heads {
            gather_head(qs, t, d, h, hd, &mut qh);
            gather_head(ks, t, d, h, hd, &mut kh);
            gather_head(vs, t, d, h, hd, &mut vh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm_nt(t, hd, t, &qh, &kh, p);
            for row in p.chunks_mut(t) {
                let mut max = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            oh.iter_mut().for_each(|x| *x = 0.0);
            gemm_nn(t, t, hd, p, &vh, &mut oh);
            scatter_head(&oh, t, d, h, hd, &mut out, false);
        }
        Ok(self.push(vec![t, d], Cow::Owned(out), Op::Attention { heads, probs }, vec![q, k, v]))
    }

    /// Mean cross-entropy of `logits[B×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let xs = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        loss /= b as f64;
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
        ))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s = self.data(x).iter().sum();
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum, vec![x])
    }

    /// `[cls; patches] + pos` for `patches[N×d]`, `cls[1×d]`, `pos[(N+1)×d]`.
    pub fn assemble_tokens(&mut self, patches: VarId, cls: VarId, pos: VarId) -> Result<VarId> {
        let (n, d) = self.dims2(patches, "assemble_tokens")?;
        if self.data(cls).len() != d || self.shape(pos) != [n + 1, d] {
            return Err(Error::dim("assemble_tokens", self.shape(patches), self.shape(pos)));
        }
        let mut out = self.data(pos).to_vec();
        out[..d].iter_mut().zip(self.data(cls)).for_each(|(o, c)| *o += c);
        out[d..].iter_mut().zip(self.data(patches)).for_each(|(o, p)| *o += p);
        Ok(self.push(vec![n + 1, d], Cow::Owned(out), Op::AssembleTokens, vec![patches, cls, pos]))
    }

    /// Row `row` of `x[T×d]` as a `[1×d]` tensor.
    pub fn select_row(&mut self, x: VarId, row: usize) -> Result<VarId> {
        let (t, d) = self.dims2(x, "select_row")?;
        if row >= t {
            return Err(Error::dim("select_row", self.shape(x), &[row]));
        }
        let out = self.data(x)[row * d..(row + 1) * d].to_vec();
        Ok(self.push(vec![1, d], Cow::Owned(out), Op::SelectRow(row), vec![x]))
    }

    /// Populates gradients for every node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: VarId) -> Result<BackwardReport> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        let mut visited = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(BackwardReport {
                visited,
                recorded: self.nodes.len(),
            });
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            visited += 1;
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(BackwardReport {
            visited,
            recorded: self.nodes.len(),
        })
    }

    fn accumulate(&mut self, v: VarId, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) {
        let inputs = self.nodes[i].inputs.clone();
        let node = &self.nodes[i];
        let mut pending: Vec<(VarId, Vec<f64>)> = Vec::with_capacity(inputs.len());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, gout, &self.nodes[b.0].data, &mut da);
                    pending.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, &self.nodes[a.0].data, gout, &mut db);
                    pending.push((b, db));
                }
            }
            Op::MatMulNT => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(m, n, k, gout, &self.nodes[b.0].data, &mut da);
                    pending.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(n, m, k, gout, &self.nodes[a.0].data, &mut db);
                    pending.push((b, db));
                }
            }
            Op::Transpose => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut da = vec![0.0; r * c];
                transpose_into(r, c, gout, &mut da);
                pending.push((inputs[0], da));
            }
            Op::Add => {
                for &inp in &inputs {
                    if self.wants(inp) {
                        pending.push((inp, gout.to_vec()));
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.wants(a) {
                    let g = gout.iter().zip(self.nodes[b.0].data.iter()).map(|(g, y)| g * y).collect();
                    pending.push((a, g));
                }
                if self.wants(b) {
                    let g = gout.iter().zip(self.nodes[a.0].data.iter()).map(|(g, x)| g * x).collect();
                    pending.push((b, g));
                }
            }
            Op::AddBias => {
                let (x, b) = (inputs[0], inputs[1]);
                let n = node.shape[1];
                if self.wants(x) {
                    pending.push((x, gout.to_vec()));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n];
                    for row in gout.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    pending.push((b, db));
                }
            }
            Op::Scale(s) => {
                pending.push((inputs[0], gout.iter().map(|g| g * s).collect()));
            }
            Op::Relu => {
                let g = gout
                    .iter()
                    .zip(node.data.iter())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                pending.push((inputs[0], g));
            }
            Op::Gelu => {
                let xs = &self.nodes[inputs[0].0].data;
                let g = gout
                    .iter()
                    .zip(xs.iter())
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                pending.push((inputs[0], g));
            }
            Op::LayerNorm { xhat, rstd } => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let n = *node.shape.last().unwrap();
                let rows = rstd.len();
                let gam = &self.nodes[gamma.0].data;
                if self.wants(x) {
                    let mut dx = vec![0.0; rows * n];
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let go = &gout[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = go[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    pending.push((x, dx));
                }
                if self.wants(gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += gout[r * n + j] * xhat[r * n + j];
                        }
                    }
                    pending.push((gamma, dg));
                }
                if self.wants(beta) {
                    let mut db = vec![0.0; n];
                    for row in gout.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    pending.push((beta, db));
                }
            }
            Op::Softmax { outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = &node.data;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s: f64 = (0..len).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (gout[idx(j)] - s);
                        }
                    }
                }
                pending.push((inputs[0], dx));
            }
            Op::Attention { heads, probs } => {
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                let (t, d) = (node.shape[0], node.shape[1]);
                let heads = *heads;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qs, ks, vs) = (&self.nodes[q.0].data, &self.nodes[k.0].data, &self.nodes[v.0].data);
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut qh = vec![0.0; t * hd];
                let mut kh = vec![0.0; t * hd];
                let mut vh = vec![0.0; t * hd];
                let mut doh = vec![0.0; t * hd];
                let mut tmp = vec![0.0; t * hd];
                let mut dp = vec![0.0; t * t];
                for h in 0..heads {
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    gather_head(gout, t, d, h, hd, &mut doh);
                    gather_head(qs, t, d, h, hd, &mut qh);
                    gather_head(ks, t, d, h, hd, &mut kh);
                    gather_head(vs, t, d, h, hd, &mut vh);
                    // dV = Pᵀ dO
                    tmp.iter_mut().for_each(|x| *x = 0.0);
                    gemm_tn(t, t, hd, p, &doh, &mut tmp);
                    scatter_head(&tmp, t, d, h, hd, &mut dv, true);
                    // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled.
                    dp.iter_mut().for_each(|x| *x = 0.0);
                    gemm_nt(t, hd, t, &doh, &vh, &mut dp);
                    for r in 0..t {
                        let pr = &p[r * t..(r + 1) * t];
                        let dr = &mut dp[r * t..(r + 1) * t];
                        let s = dot(pr, dr);
                        for c in 0..t {
                            dr[c] = pr[c] * (dr[c] - s) * scale;
                        }
                    }
                    tmp.iter_mut().for_each(|x| *x = 0.0);
                    gemm_nn(t, t, hd, &dp, &kh, &mut tmp);
                    scatter_head(&tmp, t, d, h, hd, &mut dq, true);
                    tmp.iter_mut().for_each(|x| *x = 0.0);
                    gemm_tn(t, t, hd, &dp, &qh, &mut tmp);
                    scatter_head(&tmp, t, d, h, hd, &mut dk, true);
                }
                pending.push((q, dq));
                pending.push((k, dk));
                pending.push((v, dv));
            }
            Op::CrossEntropy { labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = gout[0] / b as f64;
                let mut dl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * c + l] -= 1.0;
                }
                dl.iter_mut().for_each(|v| *v *= scale);
                pending.push((inputs[0], dl));
            }
            Op::Sum => {
                let n = self.nodes[inputs[0].0].data.len();
                pending.push((inputs[0], vec![gout[0]; n]));
            }
            Op::AssembleTokens => {
                let (patches, cls, pos) = (inputs[0], inputs[1], inputs[2]);
                let d = node.shape[1];
                if self.wants(patches) {
                    pending.push((patches, gout[d..].to_vec()));
                }
                if self.wants(cls) {
                    pending.push((cls, gout[..d].to_vec()));
                }
                if self.wants(pos) {
                    pending.push((pos, gout.to_vec()));
                }
            }
            Op::SelectRow(row) => {
                let x = inputs[0];
                let (t, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![0.0; t * d];
                dx[row * d..(row + 1) * d].copy_from_slice(gout);
                pending.push((x, dx));
            }
        }
        for (v, g) in pending {
            self.accumulate(v, g);
        }
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: VarId) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Input ids of `v`; used by tests of the tape's ordering invariant.
    pub fn inputs(&self, v: VarId) -> &[VarId] {
        &self.nodes[v.0].inputs
    }
}

fn gather_head(src: &[f64], t: usize, d: usize, h: usize, hd: usize, dst: &mut [f64]) {
    for r in 0..t {
        dst[r * hd..(r + 1) * hd].copy_from_slice(&src[r * d + h * hd..r * d + (h + 1) * hd]);
    }
}

fn scatter_head(src: &[f64], t: usize, d: usize, h: usize, hd: usize, dst: &mut [f64], add: bool) {
    for r in 0..t {
        let out = &mut dst[r * d + h * hd..r * d + (h + 1) * hd];
        let inp = &src[r * hd..(r + 1) * hd];
        if add {
            out.iter_mut().zip(inp).for_each(|(o, i)| *o += i);
        } else {
            out.copy_from_slice(inp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut g = Graph::new();
        let i2 = Tensor::eye(2);
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (a, b) = (g.constant(&i2), g.constant(&m));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), m.data());

        let r = Tensor::from_rows(&[&[1.0, 2.0]]);
        let col = Tensor::from_rows(&[&[3.0], &[4.0]]);
        let (a, b) = (g.constant(&r), g.constant(&col));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut r = rng(1);
        let a = Tensor::randn(&[5, 7], 1.0, &mut r).with_requires_grad(true);
        let b = Tensor::randn(&[7, 3], 1.0, &mut r).with_requires_grad(true);
        let w = Tensor::randn(&[5, 3], 1.0, &mut r);
        let report = check_gradients(&[a, b], 1e-5, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let wv = g.input(w.clone());
            let p = g.mul(c, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        report.assert_within(1e-6);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[3], vec![0.0; 3]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.input(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_gradient_checks() {
        let mut r = rng(2);
        let x = Tensor::randn(&[6], 1.0, &mut r).with_requires_grad(true);
        let w = Tensor::randn(&[6], 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.softmax(xv, 0).unwrap();
        let s: f64 = g.data(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(g.data(y).iter().all(|&v| v > 0.0));

        check_gradients(&[x], 1e-5, |g, v| {
            let y = g.softmax(v[0], 0)?;
            let wv = g.input(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap()
        .assert_within(1e-6);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut r = rng(9);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r).with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.softmax(xv, 0).unwrap();
        for c in 0..4 {
            let s: f64 = (0..3).map(|rr| g.data(y)[rr * 4 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let w = Tensor::randn(&[3, 4], 1.0, &mut r);
        check_gradients(&[x.clone()], 1e-5, |g, v| {
            let y = g.softmax(v[0], 0)?;
            let wv = g.input(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap()
        .assert_within(1e-6);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        assert!(g.softmax(xv, 2).is_err());
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut g = Graph::new();
        let ones = Tensor::ones(&[4]);
        let zeros = Tensor::zeros(&[4]);
        let x = g.input(Tensor::new(&[1, 4], vec![5.0; 4]).unwrap());
        let (ga, be) = (g.constant(&ones), g.constant(&zeros));
        let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0; 4]);

        let ones2 = Tensor::ones(&[2]);
        let zeros2 = Tensor::zeros(&[2]);
        let x = g.input(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
        let (ga, be) = (g.constant(&ones2), g.constant(&zeros2));
        let y = g.layer_norm(x, ga, be, 0.0).unwrap();
        assert_eq!(g.data(y), &[-1.0, 1.0]);

        let x = g.input(Tensor::new(&[1, 2], vec![2.0, 2.0]).unwrap());
        let y = g.layer_norm(x, ga, be, 0.0).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_rows_centered_and_gradients() {
        let mut r = rng(4);
        let x = Tensor::randn(&[4, 8], 2.0, &mut r).with_requires_grad(true);
        let gamma = Tensor::randn(&[8], 1.0, &mut r).with_requires_grad(true);
        let beta = Tensor::randn(&[8], 1.0, &mut r).with_requires_grad(true);
        let ones = Tensor::ones(&[8]);
        let zeros = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let (ga, be) = (g.constant(&ones), g.constant(&zeros));
        let y = g.layer_norm(xv, ga, be, 1e-5).unwrap();
        for row in g.data(y).chunks(8) {
            assert!((row.iter().sum::<f64>() / 8.0).abs() < 1e-12);
        }

        let w = Tensor::randn(&[4, 8], 1.0, &mut r);
        check_gradients(&[x, gamma, beta], 1e-5, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let wv = g.input(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap()
        .assert_within(1e-6);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::ones(&[2, 2]).with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.scale(xv, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])
            .unwrap()
            .with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn frozen_weight_gets_no_gradient() {
        // loss = sum(W·x): grad(x)_i = Σ_j W_ji, the row sums of Wᵀ.
        let w = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let x = Tensor::new(&[3, 1], vec![0.3, -0.7, 2.0]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let (wv, xv) = (g.leaf(&w), g.leaf(&x));
        let y = g.matmul(wv, xv).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(wv).is_none());
        assert_eq!(g.grad(xv).unwrap(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut r = rng(5);
        let a = Tensor::randn(&[3, 3], 1.0, &mut r).with_requires_grad(true);
        let mut g = Graph::new();
        let av = g.leaf(&a);
        let b = g.matmul(av, av).unwrap();
        let c = g.relu(b);
        let d = g.add(c, av).unwrap();
        let s = g.sum(d);
        for id in [b, c, d, s] {
            assert!(g.inputs(id).iter().all(|i| i.index() < id.index()));
        }
        let rep = g.backward(s).unwrap();
        assert_eq!(rep.visited, 5);
    }

    #[test]
    fn elementwise_and_structural_ops_gradients() {
        let mut r = rng(6);
        let x = Tensor::randn(&[4, 5], 1.0, &mut r).with_requires_grad(true);
        let b = Tensor::randn(&[5], 1.0, &mut r).with_requires_grad(true);
        let cls = Tensor::randn(&[1, 5], 1.0, &mut r).with_requires_grad(true);
        let pos = Tensor::randn(&[5, 5], 1.0, &mut r).with_requires_grad(true);
        let w = Tensor::randn(&[5, 5], 1.0, &mut r);
        check_gradients(&[x, b, cls, pos], 1e-5, |g, v| {
            let h = g.add_bias(v[0], v[1])?;
            let h = g.gelu(h);
            let t = g.assemble_tokens(h, v[2], v[3])?;
            let t = g.transpose(t)?;
            let t = g.scale(t, 0.7);
            let wv = g.input(w.clone());
            let p = g.mul(t, wv)?;
            let r = g.select_row(p, 2)?;
            let rr = g.relu(r);
            let q = g.matmul_nt(p, p)?;
            let s1 = g.sum(q);
            let s2 = g.sum(rr);
            let s = g.add(s1, s2)?;
            Ok(s)
        })
        .unwrap()
        .assert_within(1e-6);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut r = rng(7);
        let q = Tensor::randn(&[5, 8], 1.0, &mut r).with_requires_grad(true);
        let k = Tensor::randn(&[5, 8], 1.0, &mut r).with_requires_grad(true);
        let v = Tensor::randn(&[5, 8], 1.0, &mut r).with_requires_grad(true);
        let w = Tensor::randn(&[5, 8], 1.0, &mut r);
        check_gradients(&[q, k, v], 1e-5, |g, vars| {
            let o = g.attention(vars[0], vars[1], vars[2], 2)?;
            let wv = g.input(w.clone());
            let p = g.mul(o, wv)?;
            Ok(g.sum(p))
        })
        .unwrap()
        .assert_within(1e-6);
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 6]));
        let l = g.cross_entropy(x, &[2]).unwrap();
        assert!((g.data(l)[0] - 6f64.ln()).abs() < 1e-15);

        let mut logits = vec![0.0; 6];
        logits[3] = 100.0;
        let x = g.input(Tensor::new(&[1, 6], logits).unwrap());
        let l = g.cross_entropy(x, &[3]).unwrap();
        assert!(g.data(l)[0] < 1e-40);
        assert!(g.cross_entropy(x, &[6]).is_err());

        let mut r = rng(8);
        let z = Tensor::randn(&[4, 6], 1.0, &mut r).with_requires_grad(true);
        check_gradients(&[z], 1e-5, |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2]))
            .unwrap()
            .assert_within(1e-6);
    }

}
