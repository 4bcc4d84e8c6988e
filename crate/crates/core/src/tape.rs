//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes;
//! parents always precede children, so [`Tape::backward`] is a single
//! reverse sweep that accumulates gradients additively. Leaves are marked
//! trainable or frozen; the optimizer only ever reads trainable leaf
//! gradients. A fresh tape is built per training step (define-by-run).
//!
//! All reductions run in f64.

use crate::codebook::Codebook;
use crate::error::Result;
use crate::quant::{fake_quant_backward, fake_quant_forward, QuantState};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape does not match data length");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · other`, shapes (m×k)·(k×n).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dims differ");
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(&mut out.data, &self.data, &other.data, self.rows, self.cols, other.cols);
        out
    }

    /// `selfᵀ · other`, shapes (k×m)ᵀ·(k×n).
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "t_matmul outer dims differ");
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a != 0.0 {
                    let o = out.row_mut(i);
                    for (j, &b) in b_row.iter().enumerate() {
                        o[j] += a * b;
                    }
                }
            }
        }
        out
    }

    /// `self · otherᵀ`, shapes (m×k)·(n×k)ᵀ.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t inner dims differ");
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o = out.row_mut(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                o[j] = dot(a_row, b_row);
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor, s: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    /// Population mean and standard deviation of all entries.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Euclidean norm of one row.
    pub fn row_norm(&self, r: usize) -> f64 {
        dot(self.row(r), self.row(r)).sqrt()
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a · b` with a (m×k), b (k×n), cache-friendly over rows of b.
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += av * bv;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

enum Op {
    Leaf { trainable: bool },
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// x (r×c) + bias (1×c) broadcast over rows.
    AddBiasRow(NodeId, NodeId),
    /// x (reps·n × c) + tile (n×c) repeated `reps` times.
    AddTiled(NodeId, NodeId, usize),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    SoftmaxRows(NodeId),
    /// Multi-head attention over `seq`-length segments; caches the
    /// per-(segment, head) attention probabilities.
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, seq: usize, attn: Vec<Tensor> },
    /// (groups·g × c) → (groups × c) by averaging g consecutive rows.
    MeanPoolGroups(NodeId, usize),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    Sum(NodeId),
    /// Fixed-coefficient contraction to a scalar: Σ x ⊙ w.
    WeightedSum(NodeId, Tensor),
    FakeQuant { w: NodeId, state: QuantState },
}

const LN_EPS: f64 = 1e-5;

/// Records a forward computation for one backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a leaf. Frozen leaves still receive gradients internally
    /// (the chain must pass through them when they feed activations) but
    /// are never reported as trainable.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf { trainable })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(value, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        assert_eq!(bv.rows, 1, "bias must be a row vector");
        assert_eq!(bv.cols, xv.cols, "bias width mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows {
            for (slot, &b) in value.row_mut(r).iter_mut().zip(&bv.data) {
                *slot += b;
            }
        }
        self.push(value, Op::AddBiasRow(x, bias))
    }

    pub fn add_tiled(&mut self, x: NodeId, tile: NodeId, reps: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let tv = &self.nodes[tile.0].value;
        assert_eq!(xv.rows, tv.rows * reps, "tile repetition mismatch");
        assert_eq!(xv.cols, tv.cols);
        let mut value = xv.clone();
        for r in 0..value.rows {
            let t_row = tv.row(r % tv.rows);
            for (slot, &t) in value.row_mut(r).iter_mut().zip(t_row) {
                *slot += t;
            }
        }
        self.push(value, Op::AddTiled(x, tile, reps))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let value = self.nodes[x.0].value.scale(s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.relu();
        self.push(value, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert_eq!(gv.cols, xv.cols);
        assert_eq!(bv.cols, xv.cols);
        let mut xhat = Tensor::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut value = Tensor::zeros(xv.rows, xv.cols);
        let n = xv.cols as f64;
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            let out = value.row_mut(r);
            for c in 0..xv.cols {
                xh[c] = (row[c] - mean) * is;
                out[c] = gv.data[c] * xh[c] + bv.data[c];
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut value = xv.clone();
        for r in 0..value.rows {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// (segments·seq × dim); heads split the feature dimension.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, seq: usize) -> NodeId {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        assert_eq!(qv.rows % seq, 0, "rows must tile into sequences");
        assert_eq!(qv.cols % heads, 0, "heads must divide feature dim");
        assert_eq!((qv.rows, qv.cols), (kv.rows, kv.cols));
        assert_eq!((qv.rows, qv.cols), (vv.rows, vv.cols));
        let segments = qv.rows / seq;
        let dh = qv.cols / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, qv.cols);
        let mut attn = Vec::with_capacity(segments * heads);
        for s in 0..segments {
            for h in 0..heads {
                let qh = extract_head(qv, s, seq, h, dh);
                let kh = extract_head(kv, s, seq, h, dh);
                let vh = extract_head(vv, s, seq, h, dh);
                let mut scores = qh.matmul_t(&kh).scale(scale);
                for r in 0..scores.rows {
                    softmax_in_place(scores.row_mut(r));
                }
                let oh = scores.matmul(&vh);
                scatter_head(&mut out, &oh, s, seq, h, dh);
                attn.push(scores);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, seq, attn })
    }

    pub fn mean_pool_groups(&mut self, x: NodeId, group: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rows % group, 0, "group must divide rows");
        let groups = xv.rows / group;
        let mut value = Tensor::zeros(groups, xv.cols);
        for g in 0..groups {
            let out = value.row_mut(g);
            for r in 0..group {
                for (o, &v) in out.iter_mut().zip(xv.row(g * group + r)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= group as f64;
            }
        }
        self.push(value, Op::MeanPoolGroups(x, group))
    }

    /// Mean cross-entropy between row logits and integer labels; returns
    /// a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.rows, labels.len(), "one label per row");
        let mut probs = Tensor::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for r in 0..lv.rows {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
            let p = probs.row_mut(r);
            for c in 0..row.len() {
                p[c] = (row[c] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / lv.rows as f64);
        self.push(value, Op::CrossEntropy { logits, labels, probs })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.nodes[x.0].value.data.iter().sum());
        self.push(value, Op::Sum(x))
    }

    /// Scalar contraction against fixed coefficients (not a node).
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!((xv.rows, xv.cols), (weights.rows, weights.cols));
        let value = Tensor::scalar(xv.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum());
        self.push(value, Op::WeightedSum(x, weights))
    }

    /// Fake-quantizes a weight leaf through the codebook; backward routes
    /// through the exact STE contraction.
    pub fn fake_quant(&mut self, w: NodeId, cb: &Codebook, block_count: usize) -> Result<NodeId> {
        let wv = &self.nodes[w.0].value;
        let (q, state) = fake_quant_forward(&wv.data, cb, block_count)?;
        let value = Tensor::from_vec(wv.rows, wv.cols, q);
        Ok(self.push(value, Op::FakeQuant { w, state }))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate additively;
    /// leaves keep theirs for the caller to read.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        for node in &mut self.nodes {
            node.grad.data.fill(0.0);
        }
        self.nodes[loss.0].grad.data[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = &node.grad;
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Matmul(a, b) => {
                    let (av, bv) = (&before[a.0].value, &before[b.0].value);
                    let da = g.matmul_t(bv);
                    let db = av.t_matmul(g);
                    // Parents are distinct earlier nodes; accumulate one
                    // at a time to satisfy the borrow checker.
                    before[a.0].grad.add_assign_scaled(&da, 1.0);
                    before[b.0].grad.add_assign_scaled(&db, 1.0);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    before[a.0].grad.add_assign_scaled(g, 1.0);
                    before[b.0].grad.add_assign_scaled(g, 1.0);
                }
                Op::AddBiasRow(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    before[x.0].grad.add_assign_scaled(g, 1.0);
                    let cols = g.cols;
                    for r in 0..g.rows {
                        let row = g.row(r);
                        let bg = &mut before[bias.0].grad;
                        for c in 0..cols {
                            bg.data[c] += row[c];
                        }
                    }
                }
                Op::AddTiled(x, tile, _reps) => {
                    let (x, tile) = (*x, *tile);
                    before[x.0].grad.add_assign_scaled(g, 1.0);
                    let tile_rows = before[tile.0].grad.rows;
                    for r in 0..g.rows {
                        let row = g.row(r);
                        let tg = before[tile.0].grad.row_mut(r % tile_rows);
                        for (t, &v) in tg.iter_mut().zip(row) {
                            *t += v;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let (x, s) = (*x, *s);
                    before[x.0].grad.add_assign_scaled(g, s);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mask: Vec<f64> = before[x.0]
                        .value
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    for (slot, m) in before[x.0].grad.data.iter_mut().zip(mask) {
                        *slot += m;
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let gv = before[gamma.0].value.data.clone();
                    let n = g.cols as f64;
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        // Parameter grads.
                        {
                            let gg = &mut before[gamma.0].grad;
                            for c in 0..g.cols {
                                gg.data[c] += gr[c] * xh[c];
                            }
                        }
                        {
                            let bg = &mut before[beta.0].grad;
                            for c in 0..g.cols {
                                bg.data[c] += gr[c];
                            }
                        }
                        // Input grad.
                        let dxhat: Vec<f64> = (0..g.cols).map(|c| gr[c] * gv[c]).collect();
                        let mean_dx = dxhat.iter().sum::<f64>() / n;
                        let mean_dx_xh =
                            dxhat.iter().zip(xh).map(|(d, &h)| d * h).sum::<f64>() / n;
                        let is = inv_std[r];
                        let xg = before[x.0].grad.row_mut(r);
                        for c in 0..g.cols {
                            xg[c] += is * (dxhat[c] - mean_dx - xh[c] * mean_dx_xh);
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let p = &node.value;
                    for r in 0..g.rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner: f64 = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let xg = before[x.0].grad.row_mut(r);
                        for c in 0..g.cols {
                            xg[c] += pr[c] * (gr[c] - inner);
                        }
                    }
                }
                Op::Attention { q, k, v, heads, seq, attn } => {
                    let (q, k, v) = (*q, *k, *v);
                    let (heads, seq) = (*heads, *seq);
                    let dh = g.cols / heads;
                    let segments = g.rows / seq;
                    let scale = 1.0 / (dh as f64).sqrt();
                    for s in 0..segments {
                        for h in 0..heads {
                            let a = &attn[s * heads + h];
                            let doh = extract_head(g, s, seq, h, dh);
                            let qh = extract_head(&before[q.0].value, s, seq, h, dh);
                            let kh = extract_head(&before[k.0].value, s, seq, h, dh);
                            let vh = extract_head(&before[v.0].value, s, seq, h, dh);
                            let dvh = a.t_matmul(&doh);
                            let mut ds = doh.matmul_t(&vh);
                            for r in 0..ds.rows {
                                let ar = a.row(r);
                                let dr = ds.row_mut(r);
                                let inner: f64 =
                                    ar.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
                                for c in 0..ar.len() {
                                    dr[c] = ar[c] * (dr[c] - inner);
                                }
                            }
                            let dqh = ds.matmul(&kh).scale(scale);
                            let dkh = ds.t_matmul(&qh).scale(scale);
                            scatter_head_add(&mut before[q.0].grad, &dqh, s, seq, h, dh);
                            scatter_head_add(&mut before[k.0].grad, &dkh, s, seq, h, dh);
                            scatter_head_add(&mut before[v.0].grad, &dvh, s, seq, h, dh);
                        }
                    }
                }
                Op::MeanPoolGroups(x, group) => {
                    let (x, group) = (*x, *group);
                    let inv = 1.0 / group as f64;
                    for r in 0..before[x.0].grad.rows {
                        let src = g.row(r / group).to_vec();
                        let dst = before[x.0].grad.row_mut(r);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s * inv;
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let scale = g.data[0] / probs.rows as f64;
                    for r in 0..probs.rows {
                        let pr = probs.row(r);
                        let label = labels[r];
                        let lg = before[logits.0].grad.row_mut(r);
                        for c in 0..pr.len() {
                            let one_hot = if c == label { 1.0 } else { 0.0 };
                            lg[c] += (pr[c] - one_hot) * scale;
                        }
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    let gv = g.data[0];
                    for slot in before[x.0].grad.data.iter_mut() {
                        *slot += gv;
                    }
                }
                Op::WeightedSum(x, weights) => {
                    let x = *x;
                    let gv = g.data[0];
                    for (slot, &w) in before[x.0].grad.data.iter_mut().zip(&weights.data) {
                        *slot += gv * w;
                    }
                }
                Op::FakeQuant { w, state } => {
                    let w = *w;
                    let upstream = fake_quant_backward(state, &g.data)
                        .expect("quant state matches forward");
                    for (slot, u) in before[w.0].grad.data.iter_mut().zip(upstream) {
                        *slot += u;
                    }
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn extract_head(x: &Tensor, segment: usize, seq: usize, head: usize, dh: usize) -> Tensor {
    let mut out = Tensor::zeros(seq, dh);
    for r in 0..seq {
        let src = &x.row(segment * seq + r)[head * dh..(head + 1) * dh];
        out.row_mut(r).copy_from_slice(src);
    }
    out
}

fn scatter_head(x: &mut Tensor, head_data: &Tensor, segment: usize, seq: usize, head: usize, dh: usize) {
    for r in 0..seq {
        let dst = &mut x.row_mut(segment * seq + r)[head * dh..(head + 1) * dh];
        dst.copy_from_slice(head_data.row(r));
    }
}

fn scatter_head_add(
    x: &mut Tensor,
    head_data: &Tensor,
    segment: usize,
    seq: usize,
    head: usize,
    dh: usize,
) {
    for r in 0..seq {
        let dst = &mut x.row_mut(segment * seq + r)[head * dh..(head + 1) * dh];
        for (d, &s) in dst.iter_mut().zip(head_data.row(r)) {
            *d += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]), true);
        let loss = tape.sum(w);
        tape.backward(loss);
        assert_eq!(tape.grad(w).data, vec![1.0; 6]);
    }

    #[test]
    fn matmul_values_and_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(1, 2, vec![3.0, 4.0]), true);
        let b = tape.leaf(Tensor::from_vec(2, 1, vec![2.0, 5.0]), true);
        let y = tape.matmul(a, b);
        assert_eq!(tape.value(y).data, vec![26.0]);
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(a).data, vec![2.0, 5.0]);
        assert_eq!(tape.grad(b).data, vec![3.0, 4.0]);
    }

    #[test]
    fn gradient_accumulates_on_fanout() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.add(x, x); // 2x
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).data, vec![2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(2, 4), true);
        let loss = tape.cross_entropy(logits, vec![0, 3]);
        tape.backward(loss);
        let expected = (4.0f64).ln();
        assert!((tape.value(loss).data[0] - expected).abs() < 1e-12);
        // d/dlogit = (p - onehot)/rows
        let g = tape.grad(logits);
        assert!((g.get(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.get(0, 1) - 0.25 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_uniform_when_scores_constant() {
        // Zero queries give uniform attention; the output is the mean of V.
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::zeros(3, 2), false);
        let k = tape.leaf(Tensor::from_vec(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]), false);
        let v = tape.leaf(Tensor::from_vec(3, 2, vec![3.0, 0.0, 0.0, 3.0, 3.0, 3.0]), false);
        let out = tape.attention(q, k, v, 1, 3);
        for r in 0..3 {
            assert!((tape.value(out).get(r, 0) - 2.0).abs() < 1e-12);
            assert!((tape.value(out).get(r, 1) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_averages_groups() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(4, 1, vec![1.0, 3.0, 10.0, 20.0]), true);
        let pooled = tape.mean_pool_groups(x, 2);
        assert_eq!(tape.value(pooled).data, vec![2.0, 15.0]);
        let loss = tape.sum(pooled);
        tape.backward(loss);
        assert_eq!(tape.grad(x).data, vec![0.5; 4]);
    }

    #[test]
    fn layer_norm_output_is_normalized() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]), false);
        let gamma = tape.leaf(Tensor::from_vec(1, 4, vec![1.0; 4]), false);
        let beta = tape.leaf(Tensor::zeros(1, 4), false);
        let y = tape.layer_norm(x, gamma, beta);
        let row = tape.value(y).row(0);
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
