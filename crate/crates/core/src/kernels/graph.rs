//! Per-step compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. A graph is
//! built for one forward pass and dropped after `backward`.

use std::sync::Arc;

use super::gemm::{gemm, View, ViewMut};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a packed attention input: `n_seq` sequences of `seq_len` rows,
/// each row holding `n_heads` contiguous head slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
}

/// Cos/sin tables for pairwise rotation, `seq_len x half_dim` each.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationTable {
    pub seq_len: usize,
    pub half_dim: usize,
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f32>,
    },
    SoftmaxRows(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Rotate {
        x: Var,
        table: Arc<RotationTable>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        n_scored: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f32>,
    },
    MeanPoolRows {
        x: Var,
        group: usize,
    },
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNT(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::Silu(x) | Op::SoftmaxRows(x) | Op::Sum(x) => vec![*x],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Embedding { table, .. } => vec![*table],
            Op::Rotate { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::MeanPoolRows { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the loss does not depend on `var` (the gradient is zero).
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{what} expects a matrix, got shape {s:?}"))),
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_2d(ta, "matmul")?;
        let (k2, n) = check_2d(tb, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(1.0, View::dense(ta.data(), m, k), View::dense(tb.data(), k, n), 0.0, ViewMut::dense(&mut out, m, n));
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a [m x k] * b^T` with `b [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_2d(ta, "matmul_nt")?;
        let (n, k2) = check_2d(tb, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt of {:?} by transpose of {:?}: inner dimensions differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(1.0, View::dense(ta.data(), m, k), View::dense_t(tb.data(), n, k), 0.0, ViewMut::dense(&mut out, m, n));
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a length-`c` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::shape(format!(
                "bias of shape {:?} for rows of width {c}",
                tb.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            add_into(row, tb.data());
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "elementwise mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.push(value, Op::Scale(x, factor))
    }

    /// Elementwise `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * sigmoid(v)).collect())
            .expect("same shape");
        self.push(value, Op::Silu(x))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` over the trailing dimension.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if d == 0 || tg.numel() != d {
            return Err(Error::shape(format!(
                "rmsnorm gain {:?} for input {:?}",
                tg.shape(),
                tx.shape()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid_arg(format!("rmsnorm eps {eps} must be positive")));
        }
        let mut data = vec![0.0; tx.numel()];
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for (row, out) in tx.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
            let inv = (1.0 / (ms + eps as f64).sqrt()) as f32;
            inv_rms.push(inv);
            for ((o, &v), &g) in out.iter_mut().zip(row).zip(tg.data()) {
                *o = v * inv * g;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    /// Gathers rows of `table [V x H]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        let (v, h) = check_2d(tt, "embedding")?;
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::InvalidInput(format!(
                    "token id {id} outside embedding table of {v} rows"
                )));
            }
            data.extend_from_slice(tt.row(id as usize));
        }
        let value = Tensor::new(vec![ids.len(), h], data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Rotates consecutive pairs `(x[2i], x[2i+1])` of each head slice by the
    /// angle table. Row `r` uses table row `r % seq_len`.
    pub fn rotate_pairs(&mut self, x: Var, table: Arc<RotationTable>) -> Result<Var> {
        let tx = self.value(x);
        let width = tx.cols();
        let head_dim = 2 * table.half_dim;
        if head_dim == 0 || !width.is_multiple_of(head_dim) {
            return Err(Error::shape(format!(
                "rotary table for head_dim {head_dim} applied to rows of width {width}"
            )));
        }
        if !tx.rows().is_multiple_of(table.seq_len) {
            return Err(Error::shape(format!(
                "{} rows are not a whole number of {}-position sequences",
                tx.rows(),
                table.seq_len
            )));
        }
        let mut data = tx.data().to_vec();
        rotate_rows(&mut data, width, &table, false);
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Rotate { x, table }))
    }

    /// Causal multi-head attention over packed `q`, `k`, `v`, each
    /// `[n_seq * seq_len x n_heads * head_dim]`. Scores are scaled by
    /// `1/sqrt(head_dim)` and position `i` sees only positions `j <= i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let AttentionLayout { n_seq, seq_len: t, n_heads } = layout;
        let tq = self.value(q);
        let width = tq.cols();
        if n_heads == 0 || !width.is_multiple_of(n_heads) || tq.rows() != n_seq * t {
            return Err(Error::shape(format!(
                "attention input {:?} does not match layout {layout:?}",
                tq.shape()
            )));
        }
        let dh = width / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (tq.data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; tq.numel()];
        let mut probs = vec![0.0; n_seq * n_heads * t * t];
        for s in 0..n_seq {
            for h in 0..n_heads {
                let off = s * t * width + h * dh;
                let p = &mut probs[(s * n_heads + h) * t * t..][..t * t];
                gemm(
                    scale,
                    head_view(qd, off, t, dh, width),
                    head_view(kd, off, t, dh, width).t(),
                    0.0,
                    ViewMut::dense(p, t, t),
                );
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(0.0);
                }
                gemm(
                    1.0,
                    View::dense(p, t, t),
                    head_view(vd, off, t, dh, width),
                    0.0,
                    head_view_mut(&mut out, off, t, dh, width),
                );
            }
        }
        let value = Tensor::new(tq.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Attention { q, k, v, layout, probs }))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, vocab) = check_2d(tl, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(format!(
                "cross_entropy over {t} rows given {} targets and {} mask flags",
                targets.len(),
                mask.len()
            )));
        }
        let n_scored = mask.iter().filter(|&&m| m).count();
        if n_scored == 0 {
            return Err(Error::invalid_arg("cross_entropy with every position masked"));
        }
        let mut probs = vec![0.0f32; t * vocab];
        let mut total = 0.0f64;
        for r in 0..t {
            let row = tl.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + z.ln();
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v as f64 - lse).exp() as f32;
            }
            if mask[r] {
                let target = targets[r] as usize;
                if target >= vocab {
                    return Err(Error::InvalidInput(format!("target {target} outside {vocab} classes")));
                }
                total += lse - row[target] as f64;
            }
        }
        let loss = (total / n_scored as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite cross-entropy {loss}")));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                n_scored,
            },
        ))
    }

    /// Per-label sigmoid cross-entropy, summed over labels and averaged over rows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "bce logits {:?} vs targets {:?}",
                tl.shape(),
                targets.shape()
            )));
        }
        let total: f64 = tl
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| {
                let (x, y) = (x as f64, y as f64);
                x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let loss = (total / tl.rows().max(1) as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Averages consecutive groups of `group` rows: `[n*group x c] -> [n x c]`.
    pub fn mean_pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if group == 0 || !tx.rows().is_multiple_of(group) {
            return Err(Error::shape(format!("{} rows do not split into groups of {group}", tx.rows())));
        }
        let n = tx.rows() / group;
        let mut data = vec![0.0f32; n * c];
        for g in 0..n {
            let out = &mut data[g * c..(g + 1) * c];
            for r in 0..group {
                add_into(out, tx.row(g * group + r));
            }
            out.iter_mut().for_each(|v| *v /= group as f32);
        }
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::MeanPoolRows { x, group }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// `requires_grad` that the loss depends on receives `d loss / d leaf`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(Error::Internal(format!(
                        "cycle: node {i} consumes node {} which is not earlier",
                        input.0
                    )));
                }
            }
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(da) = slot(nodes, grads, *a) {
                    gemm(1.0, View::dense(g, m, n), View::dense_t(tb.data(), k, n), 1.0, ViewMut::dense(da, m, k));
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    gemm(1.0, View::dense_t(ta.data(), m, k), View::dense(g, m, n), 1.0, ViewMut::dense(db, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if let Some(da) = slot(nodes, grads, *a) {
                    gemm(1.0, View::dense(g, m, n), View::dense(tb.data(), n, k), 1.0, ViewMut::dense(da, m, k));
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    gemm(1.0, View::dense_t(g, m, n), View::dense(ta.data(), m, k), 1.0, ViewMut::dense(db, n, k));
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    add_into(db, g);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    add_into(dx, g);
                }
                let c = nodes[bias.0].value.numel();
                if let Some(db) = slot(nodes, grads, *bias) {
                    for row in g.chunks_exact(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Silu(x) => {
                let tx = &nodes[x.0].value;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(tx.data()) {
                        let s = sigmoid(xv);
                        *d += gv * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (&nodes[x.0].value, &nodes[gain.0].value);
                let d = tx.cols();
                if let Some(dgain) = slot(nodes, grads, *gain) {
                    for ((row, grow), &inv) in tx.data().chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms) {
                        for ((dg, &xv), &gv) in dgain.iter_mut().zip(row).zip(grow) {
                            *dg += gv * xv * inv;
                        }
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (((row, grow), drow), &inv) in tx
                        .data()
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .zip(inv_rms)
                    {
                        let dot: f64 = row
                            .iter()
                            .zip(grow)
                            .zip(tg.data())
                            .map(|((&xv, &gv), &gn)| (xv * gv * gn) as f64)
                            .sum();
                        let coef = (dot / d as f64) as f32 * inv * inv * inv;
                        for (((dv, &xv), &gv), &gn) in drow.iter_mut().zip(row).zip(grow).zip(tg.data()) {
                            *dv += gv * gn * inv - xv * coef;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((yrow, grow), drow) in y.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                        let dot: f32 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = nodes[table.0].value.cols();
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id as usize * h..(id as usize + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                }
            }
            Op::Rotate { x, table } => {
                let width = nodes[x.0].value.cols();
                if let Some(dx) = slot(nodes, grads, *x) {
                    let mut gr = g.to_vec();
                    rotate_rows(&mut gr, width, table, true);
                    add_into(dx, &gr);
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, *layout, probs, g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                n_scored,
            } => {
                let vocab = nodes[logits.0].value.cols();
                let scale = g[0] / *n_scored as f32;
                if let Some(dl) = slot(nodes, grads, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, &p) in drow.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d += scale * p;
                        }
                        drow[t as usize] -= scale;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let tl = &nodes[logits.0].value;
                let scale = g[0] / tl.rows().max(1) as f32;
                if let Some(dl) = slot(nodes, grads, *logits) {
                    for ((d, &x), &y) in dl.iter_mut().zip(tl.data()).zip(targets) {
                        *d += scale * (sigmoid(x) - y);
                    }
                }
            }
            Op::MeanPoolRows { x, group } => {
                let c = nodes[x.0].value.cols();
                let inv = 1.0 / *group as f32;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (r, drow) in dx.chunks_exact_mut(c).enumerate() {
                        let grow = &g[(r / group) * c..(r / group + 1) * c];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let AttentionLayout { n_seq, seq_len: t, n_heads } = layout;
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let width = tq.cols();
        let dh = width / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let numel = tq.numel();
        let want = |var: Var| self.nodes[var.0].requires_grad;
        // local buffers; merged into `grads` at the end (q, k, v may alias)
        let mut dq = want(q).then(|| vec![0.0f32; numel]);
        let mut dk = want(k).then(|| vec![0.0f32; numel]);
        let mut dv = want(v).then(|| vec![0.0f32; numel]);
        let mut dp = vec![0.0f32; t * t];
        for s in 0..n_seq {
            for h in 0..n_heads {
                let off = s * t * width + h * dh;
                let p = &probs[(s * n_heads + h) * t * t..][..t * t];
                if let Some(dv) = dv.as_mut() {
                    gemm(1.0, View::dense_t(p, t, t), head_view(g, off, t, dh, width), 1.0, head_view_mut(dv, off, t, dh, width));
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                gemm(
                    1.0,
                    head_view(g, off, t, dh, width),
                    head_view(tv.data(), off, t, dh, width).t(),
                    0.0,
                    ViewMut::dense(&mut dp, t, t),
                );
                // dp becomes d(scores): p * (dp - rowsum(p * dp)), times the score scale
                for i in 0..t {
                    let prow = &p[i * t..(i + 1) * t];
                    let drow = &mut dp[i * t..(i + 1) * t];
                    let dot: f32 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                    drow[i + 1..].fill(0.0);
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(1.0, View::dense(&dp, t, t), head_view(tk.data(), off, t, dh, width), 1.0, head_view_mut(dq, off, t, dh, width));
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(1.0, View::dense_t(&dp, t, t), head_view(tq.data(), off, t, dh, width), 1.0, head_view_mut(dk, off, t, dh, width));
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(local) = local {
                match grads[var.0].as_mut() {
                    Some(acc) => add_into(acc, &local),
                    None => grads[var.0] = Some(local),
                }
            }
        }
    }
}

/// The accumulation buffer for `v`, or None if it needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn head_view(data: &[f32], offset: usize, rows: usize, cols: usize, row_stride: usize) -> View<'_> {
    View {
        data,
        offset,
        rows,
        cols,
        row_stride,
        col_stride: 1,
    }
}

fn head_view_mut(data: &mut [f32], offset: usize, rows: usize, cols: usize, row_stride: usize) -> ViewMut<'_> {
    ViewMut {
        data,
        offset,
        rows,
        cols,
        row_stride,
        col_stride: 1,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Rotates pairs in place; `inverse` applies the transpose rotation.
fn rotate_rows(data: &mut [f32], width: usize, table: &RotationTable, inverse: bool) {
    let half = table.half_dim;
    let head_dim = 2 * half;
    for (r, row) in data.chunks_exact_mut(width).enumerate() {
        let pos = r % table.seq_len;
        let cos = &table.cos[pos * half..(pos + 1) * half];
        let sin = &table.sin[pos * half..(pos + 1) * half];
        for head in row.chunks_exact_mut(head_dim) {
            for (i, pair) in head.chunks_exact_mut(2).enumerate() {
                let (a, b) = (pair[0], pair[1]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
}
