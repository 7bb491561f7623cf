//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in creation order, so every node's inputs have smaller
//! indices than the node itself. The backward sweep walks the tape from the
//! loss towards index 0, which is a reverse topological order with ties broken
//! by creation index. Gradient accumulation order is therefore fixed and runs
//! are bit-reproducible.

use super::kernels::{self, MatRef};
use super::params::{ParamId, ParamStore};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Leaf,
    Param {
        store: u64,
        id: ParamId,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, Float),
    Sigmoid(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<Float>,
    },
    SoftmaxRows(Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segs: Vec<usize>,
        heads: usize,
        probs: Vec<Vec<Float>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<Float>,
        probs: Vec<Float>,
    },
    Sum(Var),
    TopKSoftmax {
        scores: Var,
        selected: Vec<usize>,
        k: usize,
    },
    ScatterRows {
        src: Var,
        idx: Vec<usize>,
    },
    MulCol(Var, Var),
    SelectEntries {
        w: Var,
        idx: Vec<usize>,
        col: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A computation tape. In inference mode no backward state is kept and
/// [`Graph::backward`] is unavailable.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph: values are computed, nothing is recorded.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
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

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = self.record && inputs.iter().any(|&i| self.tracked(i));
        let op = if tracked { op } else { Op::Constant };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is retrievable after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let tracked = self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// A parameter; tracked only when the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let tracked = self.record && p.trainable;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: if tracked {
                Op::Param {
                    store: store.store_id(),
                    id,
                }
            } else {
                Op::Constant
            },
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `s · x` where `s` is a one-element node (differentiable in both).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::dim("scale_by", self.value(x).shape(), ts.shape()));
        }
        let sv = ts.data()[0];
        let out = self.value(x).map(|v| sv * v);
        Ok(self.push(out, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: Float) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        self.push(out, Op::Silu(x), &[x])
    }

    /// Row-wise RMS normalisation: `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: Float) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("rms_norm eps must be positive"));
        }
        let (tx, tg) = (self.value(x), self.value(gain));
        let c = tx.cols();
        if tg.len() != c {
            return Err(Error::dim("rms_norm", tx.shape(), tg.shape()));
        }
        let g = tg.data();
        let mut inv = Vec::with_capacity(tx.rows());
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let r = kernels::inv_rms(row, eps);
            inv.push(r);
            data.extend(row.iter().zip(g).map(|(x, g)| x * r * g));
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }, &[x, gain]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Row lookup: `out[r] = table[idx[r]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::data(format!("gather index {i} out of range {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), c], data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q`, `k`, `v` (all `N × d`). Rows are split into independent
    /// sequences of lengths `segs`; attention never crosses a segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[usize],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::dim("attention", tq.shape(), tk.shape()));
        }
        let (n_rows, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        if segs.iter().sum::<usize>() != n_rows {
            return Err(Error::dim("attention segments", &[n_rows], segs));
        }
        let keep = self.record && (self.tracked(q) || self.tracked(k) || self.tracked(v));
        let dk = d / heads;
        let scale = 1.0 / (dk as Float).sqrt();
        let mut out = vec![0.0; n_rows * d];
        let mut probs = Vec::new();
        let mut offset = 0;
        for &n in segs {
            for h in 0..heads {
                let base = offset * d + h * dk;
                let mut p = vec![0.0; n * n];
                kernels::gemm(
                    n,
                    dk,
                    n,
                    scale,
                    MatRef::row_major(tq.data(), d).at(base),
                    MatRef::transposed(tk.data(), d).at(base),
                    0.0,
                    &mut p,
                    n,
                );
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    if causal {
                        kernels::softmax_in_place(&mut row[..=i]);
                        row[i + 1..].fill(0.0);
                    } else {
                        kernels::softmax_in_place(row);
                    }
                }
                kernels::gemm_at(
                    n,
                    n,
                    dk,
                    1.0,
                    MatRef::row_major(&p, n),
                    MatRef::row_major(tv.data(), d).at(base),
                    0.0,
                    &mut out,
                    base,
                    d,
                );
                if keep {
                    probs.push(p);
                }
            }
            offset += n;
        }
        let out = Tensor::from_parts(vec![n_rows, d], out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segs: segs.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Weighted next-token negative log-likelihood:
    /// `Σ_r weights[r] · (logsumexp(z_r) − z_r[targets[r]])`, a `[1]` node.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[Float],
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, vocab) = (t.rows(), t.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&x| x >= vocab) {
            return Err(Error::data(format!("target {bad} outside vocabulary {vocab}")));
        }
        let keep = self.record && self.tracked(logits);
        let mut loss = 0.0;
        let mut probs = Vec::new();
        for r in 0..rows {
            let row = t.row(r);
            if weights[r] != 0.0 {
                loss += weights[r] * (kernels::log_sum_exp(row) - row[targets[r]]);
            }
            if keep {
                let mut p = row.to_vec();
                kernels::softmax_in_place(&mut p);
                probs.extend(p);
            }
        }
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Per row, keep the `k` largest scores (ties resolved towards the lower
    /// index), softmax over those, zero elsewhere.
    pub fn top_k_softmax(&mut self, scores: Var, k: usize) -> Result<Var> {
        let t = self.value(scores);
        let (rows, e) = (t.rows(), t.cols());
        if k == 0 || k > e {
            return Err(Error::config(format!("top_k {k} must be in 1..={e}")));
        }
        let mut out = vec![0.0; rows * e];
        let mut selected = Vec::with_capacity(rows * k);
        let mut order: Vec<usize> = Vec::with_capacity(e);
        for r in 0..rows {
            let row = t.row(r);
            order.clear();
            order.extend(0..e);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut chosen: Vec<usize> = order[..k].to_vec();
            chosen.sort_unstable();
            let mut vals: Vec<Float> = chosen.iter().map(|&j| row[j]).collect();
            kernels::softmax_in_place(&mut vals);
            for (&j, &p) in chosen.iter().zip(&vals) {
                out[r * e + j] = p;
            }
            selected.extend(chosen);
        }
        let out = Tensor::from_parts(vec![rows, e], out);
        Ok(self.push(out, Op::TopKSoftmax { scores, selected, k }, &[scores]))
    }

    /// Rows of `src` added into a zero `[n_rows × cols]` tensor at `idx`.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let t = self.value(src);
        if t.rows() != idx.len() {
            return Err(Error::dim("scatter_rows", t.shape(), &[idx.len()]));
        }
        let c = t.cols();
        let mut out = Tensor::zeros(&[n_rows, c]);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(Error::data(format!("scatter index {i} out of range {n_rows}")));
            }
            for (o, s) in out.row_mut(i).iter_mut().zip(t.row(r)) {
                *o += *s;
            }
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    /// Scale row `r` of `x` by `w[r]` (`w` is `rows × 1`).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.len() != tx.rows() {
            return Err(Error::dim("mul_col", tx.shape(), tw.shape()));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .chunks(c)
            .zip(tw.data())
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::MulCol(x, w), &[x, w]))
    }

    /// Column `col` of `w` at rows `idx`, as an `idx.len() × 1` node.
    pub fn select_entries(&mut self, w: Var, idx: &[usize], col: usize) -> Result<Var> {
        let t = self.value(w);
        let (rows, c) = (t.rows(), t.cols());
        if col >= c || idx.iter().any(|&i| i >= rows) {
            return Err(Error::data("select_entries index out of range"));
        }
        let data = idx.iter().map(|&i| t.data()[i * c + col]).collect();
        let out = Tensor::from_parts(vec![idx.len(), 1], data);
        Ok(self.push(
            out,
            Op::SelectEntries {
                w,
                idx: idx.to_vec(),
                col,
            },
            &[w],
        ))
    }

    /// Backpropagate from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::config("backward on an inference graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let retain = matches!(node.op, Op::Leaf | Op::Param { .. });
            self.backprop_node(node, &g, &mut grads);
            if retain {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, t: Tensor| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.tracked(*a) {
                    let mut da = vec![0.0; n * k];
                    kernels::gemm(
                        n,
                        m,
                        k,
                        1.0,
                        MatRef::row_major(g.data(), m),
                        MatRef::transposed(tb.data(), m),
                        0.0,
                        &mut da,
                        k,
                    );
                    send(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * m];
                    kernels::gemm(
                        k,
                        n,
                        m,
                        1.0,
                        MatRef::transposed(ta.data(), k),
                        MatRef::row_major(g.data(), m),
                        0.0,
                        &mut db,
                        m,
                    );
                    send(*b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(x, bias) => {
                send(*x, g.clone());
                if self.tracked(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    send(
                        *bias,
                        Tensor::from_parts(self.value(*bias).shape().to_vec(), db),
                    );
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    send(*a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.tracked(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    send(*b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::ScaleBy(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let sv = ts.data()[0];
                if self.tracked(*x) {
                    send(*x, g.map(|v| v * sv));
                }
                if self.tracked(*s) {
                    let ds: Float = g.data().iter().zip(tx.data()).map(|(g, x)| g * x).sum();
                    send(*s, Tensor::from_parts(ts.shape().to_vec(), vec![ds]));
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * c)),
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                send(*x, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Silu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                send(*x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::RmsNorm { x, gain, inv } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let c = tx.cols();
                let gv = tg.data();
                if self.tracked(*x) {
                    let mut dx = Vec::with_capacity(tx.len());
                    for ((row, grow), &r) in tx.data().chunks(c).zip(g.data().chunks(c)).zip(inv)
                    {
                        let dot: Float = row
                            .iter()
                            .zip(grow)
                            .zip(gv)
                            .map(|((x, g), w)| x * g * w)
                            .sum();
                        let k = r * r * r * dot / c as Float;
                        dx.extend(
                            row.iter()
                                .zip(grow)
                                .zip(gv)
                                .map(|((x, g), w)| r * g * w - k * x),
                        );
                    }
                    send(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
                }
                if self.tracked(*gain) {
                    let mut dg = vec![0.0; c];
                    for ((row, grow), &r) in tx.data().chunks(c).zip(g.data().chunks(c)).zip(inv)
                    {
                        for ((d, x), g) in dg.iter_mut().zip(row).zip(grow) {
                            *d += g * x * r;
                        }
                    }
                    send(*gain, Tensor::from_parts(tg.shape().to_vec(), dg));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: Float = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                send(*x, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Gather { table, idx } => {
                let tt = self.value(*table);
                let mut d = Tensor::zeros(tt.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += *v;
                    }
                }
                send(*table, d);
            }
            Op::Attention {
                q,
                k,
                v,
                segs,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n_rows, d) = (tq.rows(), tq.cols());
                let dk = d / heads;
                let scale = 1.0 / (dk as Float).sqrt();
                let mut dq = vec![0.0; n_rows * d];
                let mut dkv = vec![0.0; n_rows * d];
                let mut dv = vec![0.0; n_rows * d];
                let mut offset = 0;
                let mut pi = 0;
                for &n in segs {
                    for h in 0..*heads {
                        let base = offset * d + h * dk;
                        let p = &probs[pi];
                        pi += 1;
                        // dV = Pᵀ·dO
                        kernels::gemm_at(
                            n,
                            n,
                            dk,
                            1.0,
                            MatRef::transposed(p, n),
                            MatRef::row_major(g.data(), d).at(base),
                            0.0,
                            &mut dv,
                            base,
                            d,
                        );
                        // dP = dO·Vᵀ
                        let mut ds = vec![0.0; n * n];
                        kernels::gemm(
                            n,
                            dk,
                            n,
                            1.0,
                            MatRef::row_major(g.data(), d).at(base),
                            MatRef::transposed(tv.data(), d).at(base),
                            0.0,
                            &mut ds,
                            n,
                        );
                        // dS = P ⊙ (dP − rowdot(dP, P)), folded with the score scale.
                        for i in 0..n {
                            let pr = &p[i * n..(i + 1) * n];
                            let dr = &mut ds[i * n..(i + 1) * n];
                            let dot: Float = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = scale * pv * (*x - dot);
                            }
                        }
                        kernels::gemm_at(
                            n,
                            n,
                            dk,
                            1.0,
                            MatRef::row_major(&ds, n),
                            MatRef::row_major(tk.data(), d).at(base),
                            0.0,
                            &mut dq,
                            base,
                            d,
                        );
                        kernels::gemm_at(
                            n,
                            n,
                            dk,
                            1.0,
                            MatRef::transposed(&ds, n),
                            MatRef::row_major(tq.data(), d).at(base),
                            0.0,
                            &mut dkv,
                            base,
                            d,
                        );
                    }
                    offset += n;
                }
                let shape = vec![n_rows, d];
                send(*q, Tensor::from_parts(shape.clone(), dq));
                send(*k, Tensor::from_parts(shape.clone(), dkv));
                send(*v, Tensor::from_parts(shape, dv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let tl = self.value(*logits);
                let vocab = tl.cols();
                let up = g.data()[0];
                let mut d = vec![0.0; tl.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = &mut d[r * vocab..(r + 1) * vocab];
                    for (o, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *o = up * w * p;
                    }
                    row[t] -= up * w;
                }
                send(*logits, Tensor::from_parts(tl.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let up = g.data()[0];
                send(*x, Tensor::full(self.value(*x).shape(), up));
            }
            Op::TopKSoftmax {
                scores,
                selected,
                k,
            } => {
                let y = &node.value;
                let e = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let sel = &selected[r * k..(r + 1) * k];
                    let dot: Float = sel
                        .iter()
                        .map(|&j| y.data()[r * e + j] * g.data()[r * e + j])
                        .sum();
                    for &j in sel {
                        let at = r * e + j;
                        d[at] = y.data()[at] * (g.data()[at] - dot);
                    }
                }
                send(*scores, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::ScatterRows { src, idx } => {
                let ts = self.value(*src);
                let mut d = Vec::with_capacity(ts.len());
                for &i in idx {
                    d.extend_from_slice(g.row(i));
                }
                send(*src, Tensor::from_parts(ts.shape().to_vec(), d));
            }
            Op::MulCol(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let c = tx.cols();
                if self.tracked(*x) {
                    let d = g
                        .data()
                        .chunks(c)
                        .zip(tw.data())
                        .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
                        .collect();
                    send(*x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
                if self.tracked(*w) {
                    let d = g
                        .data()
                        .chunks(c)
                        .zip(tx.data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*w, Tensor::from_parts(tw.shape().to_vec(), d));
                }
            }
            Op::SelectEntries { w, idx, col } => {
                let tw = self.value(*w);
                let c = tw.cols();
                let mut d = vec![0.0; tw.len()];
                for (r, &i) in idx.iter().enumerate() {
                    d[i * c + col] += g.data()[r];
                }
                send(*w, Tensor::from_parts(tw.shape().to_vec(), d));
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node, if it received any signal.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Add every parameter gradient owned by `store` into its `grad` buffer,
    /// in tape order. Frozen parameters are never tracked and so never touched.
    pub fn accumulate(&self, graph: &Graph, store: &mut ParamStore) {
        let sid = store.store_id();
        for (node, grad) in graph.nodes.iter().zip(&self.grads) {
            let (Op::Param { store: s, id }, Some(g)) = (&node.op, grad) else {
                continue;
            };
            if *s != sid {
                continue;
            }
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Float]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2, 2], &[1., 2., 3., 4.]), false);
        let b = store.add("b", t(&[2, 2], &[1., 0., 0., 1.]), true);
        let mut g = Graph::new();
        let vw = g.param(&store, w);
        let vb = g.param(&store, b);
        let y = g.matmul(vw, vb).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        grads.accumulate(&g, &mut store);
        assert!(store.get(w).grad.data().iter().all(|&x| x == 0.0));
        assert!(store.get(b).grad.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn causal_attention_rows_ignore_future() {
        let mut g = Graph::inference();
        // Two identical tokens, then change only the second: the first output row must not move.
        let base = t(&[2, 2], &[0.3, -0.2, 0.1, 0.4]);
        let mut changed = base.clone();
        changed.data_mut()[2] = 5.0;
        changed.data_mut()[3] = -3.0;
        let a = g.constant(base.clone());
        let o1 = g.attention(a, a, a, &[2], 1, true).unwrap();
        let b = g.constant(changed);
        let o2 = g.attention(b, b, b, &[2], 1, true).unwrap();
        assert_eq!(g.value(o1).row(0), g.value(o2).row(0));
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut g = Graph::inference();
        let q = g.constant(t(&[1, 2], &[3.0, -1.0]));
        let v = g.constant(t(&[1, 2], &[0.25, 0.5]));
        let o = g.attention(q, q, v, &[1], 2, true).unwrap();
        assert_eq!(g.value(o).data(), &[0.25, 0.5]);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        let mut g = Graph::inference();
        let s = g.constant(t(&[1, 4], &[1.0, 2.0, 2.0, 2.0]));
        let w = g.top_k_softmax(s, 2).unwrap();
        let row = g.value(w).row(0).to_vec();
        assert_eq!(row[0], 0.0);
        assert_eq!(row[3], 0.0);
        assert!((row[1] - 0.5).abs() < 1e-15 && (row[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[2, 6]));
        let err = g.attention(x, x, x, &[2], 4, true).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
