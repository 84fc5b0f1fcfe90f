//! Define-by-run reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` walks it once in reverse. Every node is
//! a 2-D block `rows × cols`; scalars are `1 × 1`.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, attend_row, layer_norm_row};
use super::tensor::{Module, Tensor};
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One row of a candidate-weighted likelihood/unlikelihood loss.
#[derive(Clone, Debug)]
pub struct CandidateRow<S> {
    pub row: usize,
    pub ids: Vec<usize>,
    pub like: Vec<S>,
    pub unlike: Vec<S>,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    Sum(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(S, S)> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Attention { qkv: Var, heads: usize, segments: Vec<usize>, probs: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    CandidateLoss { logits: Var, rows: Vec<CandidateRow<S>>, probs: Vec<S>, eps: S },
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, [S]>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    grads: Vec<Option<Vec<S>>>,
    leaves: HashMap<usize, Var>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), leaves: HashMap::new() }
    }

    fn push(&mut self, value: Cow<'a, [S]>, rows: usize, cols: usize, requires_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a tensor as a leaf without copying it. Binding the same tensor
    /// twice yields the same handle.
    pub fn leaf(&mut self, t: &'a Tensor<S>) -> Var {
        let key = t as *const Tensor<S> as usize;
        if let Some(&v) = self.leaves.get(&key) {
            return v;
        }
        let (r, c) = t.dims2();
        let v = self.push(Cow::Borrowed(t.data()), r, c, t.requires_grad, Op::Leaf);
        self.leaves.insert(key, v);
        v
    }

    /// Pre-binds every parameter of `m` as a constant leaf, so later
    /// `leaf` calls on those tensors never track gradients.
    pub fn freeze<M: Module<S> + ?Sized>(&mut self, m: &'a M) {
        for (_, t) in m.named_params() {
            let key = t as *const Tensor<S> as usize;
            if self.leaves.contains_key(&key) {
                continue;
            }
            let (r, c) = t.dims2();
            let v = self.push(Cow::Borrowed(t.data()), r, c, false, Op::Leaf);
            self.leaves.insert(key, v);
        }
    }

    /// Owned constant block.
    pub fn constant(&mut self, data: Vec<S>, rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape mismatch");
        self.push(Cow::Owned(data), rows, cols, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> S {
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = kernels::matmul(self.value(a), self.value(b), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), n, m, rg, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shape mismatch");
        let out: Vec<S> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), r, c, rg, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(b), (1, c), "bias shape mismatch");
        let bias = self.value(b);
        let out: Vec<S> =
            self.value(x).chunks_exact(c).flat_map(|row| row.iter().zip(bias).map(|(&v, &bb)| v + bb)).collect();
        let rg = self.rg(x) || self.rg(b);
        self.push(Cow::Owned(out), r, c, rg, Op::AddBias(x, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "mul shape mismatch");
        let out: Vec<S> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), r, c, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out: Vec<S> = self.value(x).iter().map(|&v| v * s).collect();
        let (r, c) = self.dims(x);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), r, c, rg, Op::Scale(x, s))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out: Vec<S> = self.value(x).iter().map(|&v| f(v)).collect();
        let (r, c) = self.dims(x);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), r, c, rg, op)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, S::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, S::ln, Op::Log(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), r, c, rg, Op::SoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), 1, 1, rg, Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![S::zero(); r * c];
        let mut stats = Vec::with_capacity(r);
        {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for (row, o) in xv.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
                stats.push(layer_norm_row(row, g, b, o));
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Cow::Owned(out), r, c, rg, Op::LayerNorm { x, gain, bias, stats })
    }

    /// Rows of `table` picked by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (n, c) = self.dims(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < n, "gather index {id} out of range {n}");
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let rg = self.rg(table);
        self.push(Cow::Owned(out), ids.len(), c, rg, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p));
            rows += r;
            rg |= self.rg(p);
        }
        self.push(Cow::Owned(out), rows, c, rg, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (_, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&xv[r * c..(r + 1) * c]);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), rows.len(), c, rg, Op::SelectRows { x, rows: rows.to_vec() })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &rows)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= c, "slice_cols out of range");
        let out: Vec<S> =
            self.value(x).chunks_exact(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), r, len, rg, Op::SliceCols { x, start })
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `N × 3d` (queries, keys, values side by side); `segments`
    /// lists the lengths of independent sequences packed along the rows.
    /// Attention never crosses a segment boundary.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, segments: &[usize]) -> Var {
        let (n, c3) = self.dims(qkv);
        assert_eq!(c3 % 3, 0);
        let d = c3 / 3;
        assert_eq!(d % heads, 0, "model width must divide into heads");
        assert_eq!(segments.iter().sum::<usize>(), n, "segments must cover all rows");
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let x = self.value(qkv);
        let mut out = vec![S::zero(); n * d];
        let mut probs = Vec::new();
        let mut start = 0;
        for &len in segments {
            let base = &x[start * c3..(start + len) * c3];
            for h in 0..heads {
                for i in 0..len {
                    let q = &base[i * c3 + h * dh..i * c3 + (h + 1) * dh];
                    let mut p = vec![S::zero(); i + 1];
                    let o = &mut out[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh];
                    attend_row(q, &base[d..], &base[2 * d..], i + 1, c3, h * dh, scale, &mut p, o);
                    probs.extend_from_slice(&p);
                }
            }
            start += len;
        }
        let rg = self.rg(qkv);
        self.push(Cow::Owned(out), n, d, rg, Op::Attention { qkv, heads, segments: segments.to_vec(), probs })
    }

    /// Summed negative log-softmax likelihood of `targets`, one per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = self.dims(logits);
        assert_eq!(r, targets.len(), "one target per row");
        let mut probs = self.value(logits).to_vec();
        let mut loss = S::zero();
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            assert!(t < c, "target {t} out of range");
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(Cow::Owned(vec![loss]), 1, 1, rg, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Candidate-weighted likelihood and unlikelihood loss over softmax rows:
    /// `−Σ like[c]·log p(c) − Σ unlike[c]·log(1 − p(c))`, with `p` clamped to
    /// `[eps, 1 − eps]`. Returns the scalar node and the two summed parts.
    pub fn candidate_loss(&mut self, logits: Var, rows: Vec<CandidateRow<S>>, eps: S) -> (Var, S, S) {
        let (_, c) = self.dims(logits);
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * c);
        let (mut like_sum, mut unlike_sum) = (S::zero(), S::zero());
        for cr in &rows {
            let mut p = lv[cr.row * c..(cr.row + 1) * c].to_vec();
            kernels::softmax_in_place(&mut p);
            for ((&id, &s), &s2) in cr.ids.iter().zip(&cr.like).zip(&cr.unlike) {
                let pc = p[id].max(eps).min(S::one() - eps);
                like_sum -= s * pc.ln();
                unlike_sum -= s2 * (S::one() - pc).ln();
            }
            probs.extend_from_slice(&p);
        }
        let rg = self.rg(logits);
        let v = self.push(
            Cow::Owned(vec![like_sum + unlike_sum]),
            1,
            1,
            rg,
            Op::CandidateLoss { logits, rows, probs, eps },
        );
        (v, like_sum, unlike_sum)
    }

    /// Populates gradients of `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(contract(format!("backward needs a scalar loss, got {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` w.r.t. `v`; zeros when `v` was
    /// unreachable, `None` when `v` never required a gradient.
    pub fn grad(&self, v: Var) -> Option<Vec<S>> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![S::zero(); n.rows * n.cols],
        })
    }

    /// Gradient for a bound tensor.
    pub fn grad_of(&self, t: &Tensor<S>) -> Option<Vec<S>> {
        let key = t as *const Tensor<S> as usize;
        self.leaves.get(&key).and_then(|&v| self.grad(v))
    }

    /// Gradients for every parameter of `m`, in `named_params` order.
    /// Parameters not bound on this graph get `None`.
    pub fn module_grads<M: Module<S> + ?Sized>(&self, m: &M) -> Vec<Option<Vec<S>>> {
        m.named_params().into_iter().map(|(_, t)| self.grad_of(t)).collect()
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = cols;
                if self.rg(*a) {
                    let bt = kernels::transpose(self.value(*b), k, m);
                    let da = kernels::matmul(g, &bt, n, m, k);
                    self.acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); k * m];
                    kernels::matmul_tn_acc(self.value(*a), g, n, k, m, &mut db);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g);
                if self.rg(*b) {
                    let mut db = vec![S::zero(); cols];
                    for row in g.chunks_exact(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d: Vec<S> = g.iter().zip(self.value(*b)).map(|(&gg, &v)| gg * v).collect();
                    self.acc(grads, *a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<S> = g.iter().zip(self.value(*a)).map(|(&gg, &v)| gg * v).collect();
                    self.acc(grads, *b, &d);
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<S> = g.iter().map(|&v| v * *s).collect();
                self.acc(grads, *x, &d);
            }
            Op::Gelu(x) => {
                let d: Vec<S> = g.iter().zip(self.value(*x)).map(|(&gg, &v)| gg * kernels::gelu_grad(v)).collect();
                self.acc(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let d: Vec<S> = g.iter().zip(node.value.iter()).map(|(&gg, &y)| gg * (S::one() - y * y)).collect();
                self.acc(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<S> = g.iter().zip(node.value.iter()).map(|(&gg, &y)| gg * y * (S::one() - y)).collect();
                self.acc(grads, *x, &d);
            }
            Op::Log(x) => {
                let d: Vec<S> = g.iter().zip(self.value(*x)).map(|(&gg, &v)| gg / v).collect();
                self.acc(grads, *x, &d);
            }
            Op::SoftmaxRows(x) => {
                let mut d = vec![S::zero(); rows * cols];
                for ((dr, gr), yr) in
                    d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(node.value.chunks_exact(cols))
                {
                    let inner = kernels::dot(gr, yr);
                    for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - inner);
                    }
                }
                self.acc(grads, *x, &d);
            }
            Op::Sum(x) => {
                let (r, c) = self.dims(*x);
                self.acc(grads, *x, &vec![g[0]; r * c]);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let dn = S::of(cols as f64);
                let mut dx = vec![S::zero(); rows * cols];
                let mut dg = vec![S::zero(); cols];
                let mut db = vec![S::zero(); cols];
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gv[j];
                        dg[j] += gr[j] * xhat;
                        db[j] += gr[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gv[j];
                        dx[r * cols + j] = rstd * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                    }
                }
                self.acc(grads, *x, &dx);
                self.acc(grads, *gain, &dg);
                self.acc(grads, *bias, &db);
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let (n, c) = self.dims(*table);
                    let mut d = vec![S::zero(); n * c];
                    for (row, &id) in g.chunks_exact(c).zip(ids) {
                        d[id * c..(id + 1) * c].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    self.acc(grads, *table, &d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, _) = self.dims(p);
                    self.acc(grads, p, &g[off * cols..(off + r) * cols]);
                    off += r;
                }
            }
            Op::SelectRows { x, rows: picked } => {
                if self.rg(*x) {
                    let (r, c) = self.dims(*x);
                    let mut d = vec![S::zero(); r * c];
                    for (row, &src) in g.chunks_exact(c).zip(picked) {
                        d[src * c..(src + 1) * c].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    self.acc(grads, *x, &d);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let mut d = vec![S::zero(); r * c];
                for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(cols)) {
                    dr[*start..*start + cols].copy_from_slice(gr);
                }
                self.acc(grads, *x, &d);
            }
            Op::Attention { qkv, heads, segments, probs } => {
                let d = cols;
                let c3 = 3 * d;
                let dh = d / heads;
                let scale = S::one() / S::of(dh as f64).sqrt();
                let x = self.value(*qkv);
                let mut dx = vec![S::zero(); rows * c3];
                let mut pi = 0;
                let mut start = 0;
                for &len in segments {
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for i in 0..len {
                            let p = &probs[pi..pi + i + 1];
                            pi += i + 1;
                            let gi = &g[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh];
                            // dP_ij = g_i · v_j ; dv_j += p_ij g_i
                            let mut dp = vec![S::zero(); i + 1];
                            for j in 0..=i {
                                let vr = (start + j) * c3;
                                dp[j] = kernels::dot(gi, &x[vr + vo..vr + vo + dh]);
                                let pj = p[j];
                                for (dv, &gv) in dx[vr + vo..vr + vo + dh].iter_mut().zip(gi) {
                                    *dv += pj * gv;
                                }
                            }
                            let inner = kernels::dot(p, &dp);
                            let qr = (start + i) * c3;
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == S::zero() {
                                    continue;
                                }
                                let kr = (start + j) * c3;
                                for t in 0..dh {
                                    let kv = x[kr + ko + t];
                                    let qv = x[qr + qo + t];
                                    dx[qr + qo + t] += ds * kv;
                                    dx[kr + ko + t] += ds * qv;
                                }
                            }
                        }
                    }
                    start += len;
                }
                self.acc(grads, *qkv, &dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.dims(*logits).1;
                let mut d: Vec<S> = probs.iter().map(|&p| p * g[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= g[0];
                }
                self.acc(grads, *logits, &d);
            }
            Op::CandidateLoss { logits, rows: crows, probs, eps } => {
                let (r, c) = self.dims(*logits);
                let mut d = vec![S::zero(); r * c];
                for (k, cr) in crows.iter().enumerate() {
                    let p = &probs[k * c..(k + 1) * c];
                    // dL/dp_c, zero where the clamp is active
                    let mut dp = vec![S::zero(); c];
                    for ((&id, &s), &s2) in cr.ids.iter().zip(&cr.like).zip(&cr.unlike) {
                        let pc = p[id];
                        if pc <= *eps || pc >= S::one() - *eps {
                            continue;
                        }
                        dp[id] += -s / pc + s2 / (S::one() - pc);
                    }
                    let inner = kernels::dot(p, &dp);
                    let dr = &mut d[cr.row * c..(cr.row + 1) * c];
                    for ((dv, &pv), &dpv) in dr.iter_mut().zip(p).zip(&dp) {
                        *dv += g[0] * pv * (dpv - inner);
                    }
                }
                self.acc(grads, *logits, &d);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], v: Var, d: &[S]) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(d).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(d.to_vec()),
        }
    }
}

/// Numerically stable softmax of a finite vector.
pub fn softmax<S: Scalar>(logits: &[S]) -> Result<Vec<S>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::invalid("softmax input contains NaN or Inf"));
    }
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}
