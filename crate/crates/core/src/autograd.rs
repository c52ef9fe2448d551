//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParamSet`]; only parameters marked trainable
//! receive gradients, and operations whose inputs are all frozen are skipped
//! entirely during the backward sweep.

use crate::params::{ParamId, ParamSet};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const ATTN_BLOCK: usize = 128;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Tensor, inv_std: Vec<f64> },
    Gelu(Var),
    Rope { x: Var, positions: Vec<usize>, heads: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, lse: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { parts: Vec<(Var, Vec<usize>)> },
    ConcatRows(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    MeanPool { x: Var, g_h: usize, g_w: usize, window: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    HalfSumSquares(Var),
}

struct Node {
    /// `None` for parameter leaves, whose values live in the [`ParamSet`].
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the trainable parameters that took
/// part in the forward pass. Parameters that were never read have no entry.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the parameter's shape when it was not used.
    pub fn get_or_zeros(&self, id: ParamId, params: &ParamSet) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = params.value(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn empty(n_params: usize) -> Self {
        Self { by_param: vec![None; n_params] }
    }

    /// Sets the gradient of `id` directly, e.g. for optimizer tests.
    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        if self.by_param.len() <= id.index() {
            self.by_param.resize(id.index() + 1, None);
        }
        self.by_param[id.index()] = Some(grad);
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (mine, theirs) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.by_param.iter_mut().flatten() {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param.iter().flatten().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    trainable: Vec<bool>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    /// A graph in which every parameter is trainable.
    pub fn new(params: &'p ParamSet) -> Self {
        Self::with_trainable(params, vec![true; params.len()])
    }

    /// A graph in which no parameter receives gradients.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self::with_trainable(params, vec![false; params.len()])
    }

    pub fn with_trainable(params: &'p ParamSet, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), params.len(), "trainable mask length mismatch");
        Self { params, trainable, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let requires_grad = self.trainable[id.index()];
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Adds a `1 × m` row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(x).cols(), "bias width mismatch");
        let mut out = self.value(x).clone();
        let bias_row = b.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias_row) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    /// `x · w + b` with `w: d_in × d_out` and `b: 1 × d_out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut normed = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let nr = normed.row_mut(r);
            for c in 0..d {
                nr[c] = (row[c] - mean) * is;
            }
            let or = out.row_mut(r);
            for c in 0..d {
                or[c] = normed.get(r, c) * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, normed, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let u = GELU_C * (*v + 0.044715 * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        }
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Rotary position encoding. Each head's features are rotated in
    /// consecutive pairs `(2i, 2i+1)` by `position · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), positions.len(), "one position id per row required");
        let out = rotate(xv, positions, heads, base, false);
        let rg = self.rg(x);
        self.push(out, Op::Rope { x, positions: positions.to_vec(), heads, base }, rg)
    }

    /// Multi-head scaled dot-product attention over `n × d` inputs. Heads are
    /// contiguous column blocks. With `causal`, row `i` attends to rows `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (out, lse) = attention_forward(self.value(q), self.value(k), self.value(v), heads, causal);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, causal, lse }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).gather_rows(idx);
        let rg = self.rg(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    /// Builds an `n`-row tensor by placing the rows of each part at the given
    /// destination indices. Every destination row must be written exactly once.
    pub fn scatter_rows(&mut self, n: usize, parts: Vec<(Var, Vec<usize>)>) -> Var {
        assert!(!parts.is_empty(), "scatter_rows needs at least one part");
        let cols = self.value(parts[0].0).cols();
        let mut out = Tensor::zeros(n, cols);
        let mut seen = vec![false; n];
        for (var, idx) in &parts {
            let src = self.value(*var);
            assert_eq!(src.rows(), idx.len(), "scatter part row count mismatch");
            assert_eq!(src.cols(), cols, "scatter part width mismatch");
            for (r, &dst) in idx.iter().enumerate() {
                assert!(!seen[dst], "row {dst} scattered twice");
                seen[dst] = true;
                out.row_mut(dst).copy_from_slice(src.row(r));
            }
        }
        assert!(seen.iter().all(|&s| s), "scatter_rows left rows unwritten");
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        self.push(out, Op::ScatterRows { parts }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let table = self.param(table);
        let out = self.value(table).gather_rows(ids);
        let rg = self.rg(table);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Mean over `window × window` blocks of a row-major `g_h × g_w` grid of
    /// feature rows. Edge blocks are clipped and averaged over their actual cells.
    pub fn mean_pool(&mut self, x: Var, g_h: usize, g_w: usize, window: usize) -> Var {
        let out = mean_pool_forward(self.value(x), g_h, g_w, window);
        let rg = self.rg(x);
        self.push(out, Op::MeanPool { x, g_h, g_w, window }, rg)
    }

    /// Mean softmax cross-entropy over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per logits row required");
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            count += 1;
        }
        assert!(count > 0, "cross_entropy needs at least one target");
        let loss = Tensor::from_vec(1, 1, vec![total / count as f64]);
        let rg = self.rg(logits);
        self.push(loss, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg)
    }

    /// `0.5 · Σ x²`.
    pub fn half_sum_squares(&mut self, x: Var) -> Var {
        let s = 0.5 * self.value(x).sum_squares();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::HalfSumSquares(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to all trainable parameters.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            // Parameter gradients stay in place for collection below.
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Param(_)) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, dy, &mut grads);
        }

        let mut by_param = vec![None; self.params.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if self.trainable[pid] && v.0 <= loss.0 {
                    by_param[pid] = grads[v.0].take();
                }
            }
        }
        Gradients { by_param }
    }

    fn backward_node(&self, i: usize, dy: Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if self.rg(v) {
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t_matmul(&dy));
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(*bias) {
                    let mut db = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (d, g) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    acc(*bias, db);
                }
                acc(*x, dy);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.clone());
                }
                acc(*b, dy);
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                let (n, d) = dy.shape();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = Tensor::zeros(1, d);
                    let mut db = Tensor::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            dg.data_mut()[c] += dy.get(r, c) * normed.get(r, c);
                            db.data_mut()[c] += dy.get(r, c);
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if self.rg(*x) {
                    let g = self.value(*gamma).row(0);
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let xh = normed.row(r);
                        let dxh: Vec<f64> = (0..d).map(|c| dy.get(r, c) * g[c]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        let out = dx.row_mut(r);
                        for c in 0..d {
                            out[c] = k * (d as f64 * dxh[c] - s1 - xh[c] * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = dy;
                for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    *g *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                }
                acc(*x, dx);
            }
            Op::Rope { x, positions, heads, base } => {
                acc(*x, rotate(&dy, positions, *heads, *base, true));
            }
            Op::Attention { q, k, v, heads, causal, lse } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    self.nodes[i].value.as_ref().expect("attention output"),
                    &dy,
                    lse,
                    *heads,
                    *causal,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (d, g) in dx.row_mut(src).iter_mut().zip(dy.row(r)) {
                        *d += g;
                    }
                }
                acc(*x, dx);
            }
            Op::ScatterRows { parts } => {
                for (var, idx) in parts {
                    if self.rg(*var) {
                        acc(*var, dy.gather_rows(idx));
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.rg(*p) {
                        let idx: Vec<usize> = (start..start + rows).collect();
                        acc(*p, dy.gather_rows(&idx));
                    }
                    start += rows;
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *d += g;
                    }
                }
                acc(*table, dt);
            }
            Op::MeanPool { x, g_h, g_w, window } => {
                let d = dy.cols();
                let mut dx = Tensor::zeros(g_h * g_w, d);
                for_each_window(*g_h, *g_w, *window, |o, cells| {
                    let inv = 1.0 / cells.len() as f64;
                    for &cell in cells {
                        for (dd, g) in dx.row_mut(cell).iter_mut().zip(dy.row(o)) {
                            *dd += g * inv;
                        }
                    }
                });
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let scale = dy.get(0, 0) / *count as f64;
                let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let out = dl.row_mut(r);
                    for (o, p) in out.iter_mut().zip(probs.row(r)) {
                        *o = p * scale;
                    }
                    out[t] -= scale;
                }
                acc(*logits, dl);
            }
            Op::HalfSumSquares(x) => {
                let mut dx = self.value(*x).clone();
                dx.scale(dy.get(0, 0));
                acc(*x, dx);
            }
        }
    }
}

fn rotate(x: &Tensor, positions: &[usize], heads: usize, base: f64, inverse: bool) -> Tensor {
    let (n, d) = x.shape();
    assert_eq!(d % heads, 0, "width not divisible by head count");
    let hd = d / heads;
    assert_eq!(hd % 2, 0, "rotary encoding needs an even head dimension");
    let freqs: Vec<f64> = (0..hd / 2).map(|i| base.powf(-2.0 * i as f64 / hd as f64)).collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = Tensor::zeros(n, d);
    for r in 0..n {
        let pos = positions[r] as f64;
        let src = x.row(r);
        let dst = out.row_mut(r);
        for (i, f) in freqs.iter().enumerate() {
            let (s, c) = (sign * pos * f).sin_cos();
            for h in 0..heads {
                let a = h * hd + 2 * i;
                let (x0, x1) = (src[a], src[a + 1]);
                dst[a] = x0 * c - x1 * s;
                dst[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Visits each pooling window: output index and the input cell indices it covers.
pub(crate) fn for_each_window(g_h: usize, g_w: usize, window: usize, mut f: impl FnMut(usize, &[usize])) {
    assert!(window >= 1, "window must be at least 1");
    let oh = g_h.div_ceil(window);
    let ow = g_w.div_ceil(window);
    let mut cells = Vec::with_capacity(window * window);
    for oy in 0..oh {
        for ox in 0..ow {
            cells.clear();
            for y in oy * window..((oy + 1) * window).min(g_h) {
                for x in ox * window..((ox + 1) * window).min(g_w) {
                    cells.push(y * g_w + x);
                }
            }
            f(oy * ow + ox, &cells);
        }
    }
}

pub(crate) fn mean_pool_forward(x: &Tensor, g_h: usize, g_w: usize, window: usize) -> Tensor {
    assert_eq!(x.rows(), g_h * g_w, "grid size does not match row count");
    if window == 1 {
        return x.clone();
    }
    let d = x.cols();
    let mut out = Tensor::zeros(g_h.div_ceil(window) * g_w.div_ceil(window), d);
    for_each_window(g_h, g_w, window, |o, cells| {
        let row = out.row_mut(o);
        for &cell in cells {
            for (acc, v) in row.iter_mut().zip(x.row(cell)) {
                *acc += v;
            }
        }
        let n = cells.len() as f64;
        for v in row.iter_mut() {
            *v /= n;
        }
    });
    out
}

fn kv_len(causal: bool, block_end: usize, n: usize) -> usize {
    if causal {
        block_end
    } else {
        n
    }
}

/// Blocked attention forward. Returns the output and the per-(head, row)
/// log-sum-exp of the scaled scores used to rebuild probabilities in backward.
fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> (Tensor, Vec<f64>) {
    let (n, d) = q.shape();
    assert_eq!(k.shape(), (n, d), "key shape mismatch");
    assert_eq!(v.shape(), (n, d), "value shape mismatch");
    assert_eq!(d % heads, 0, "width not divisible by head count");
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor::zeros(n, d);
    let mut lse = vec![0.0; heads * n];
    let mut scores = vec![0.0; ATTN_BLOCK * n];

    for h in 0..heads {
        let off = h * hd;
        for start in (0..n).step_by(ATTN_BLOCK) {
            let end = (start + ATTN_BLOCK).min(n);
            let (b, m) = (end - start, kv_len(causal, end, n));
            let s = &mut scores[..b * m];
            gemm(
                b,
                hd,
                m,
                scale,
                (&q.data()[start * d + off..], d, 1),
                (&k.data()[off..], 1, d),
                0.0,
                (s, m, 1),
            );
            for r in 0..b {
                let row = &mut s[r * m..(r + 1) * m];
                let limit = if causal { start + r + 1 } else { m };
                let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, val) in row.iter_mut().enumerate() {
                    if j < limit {
                        *val = (*val - max).exp();
                        z += *val;
                    } else {
                        *val = 0.0;
                    }
                }
                for val in row[..limit].iter_mut() {
                    *val /= z;
                }
                lse[h * n + start + r] = max + z.ln();
            }
            gemm(
                b,
                m,
                hd,
                1.0,
                (s, m, 1),
                (&v.data()[off..], d, 1),
                0.0,
                (&mut out.data_mut()[start * d + off..], d, 1),
            );
        }
    }
    (out, lse)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    dout: &Tensor,
    lse: &[f64],
    heads: usize,
    causal: bool,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = q.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Tensor::zeros(n, d);
    let mut dk = Tensor::zeros(n, d);
    let mut dv = Tensor::zeros(n, d);
    let mut p = vec![0.0; ATTN_BLOCK * n];
    let mut ds = vec![0.0; ATTN_BLOCK * n];

    for h in 0..heads {
        let off = h * hd;
        for start in (0..n).step_by(ATTN_BLOCK) {
            let end = (start + ATTN_BLOCK).min(n);
            let (b, m) = (end - start, kv_len(causal, end, n));
            let p = &mut p[..b * m];
            let ds = &mut ds[..b * m];
            gemm(b, hd, m, scale, (&q.data()[start * d + off..], d, 1), (&k.data()[off..], 1, d), 0.0, (p, m, 1));
            for r in 0..b {
                let limit = if causal { start + r + 1 } else { m };
                let l = lse[h * n + start + r];
                for (j, val) in p[r * m..(r + 1) * m].iter_mut().enumerate() {
                    *val = if j < limit { (*val - l).exp() } else { 0.0 };
                }
            }
            // dP = dO · Vᵀ
            gemm(b, hd, m, 1.0, (&dout.data()[start * d + off..], d, 1), (&v.data()[off..], 1, d), 0.0, (ds, m, 1));
            for r in 0..b {
                let row = start + r;
                let delta: f64 = (0..hd).map(|c| dout.get(row, off + c) * out.get(row, off + c)).sum();
                for j in 0..m {
                    let idx = r * m + j;
                    ds[idx] = p[idx] * (ds[idx] - delta);
                }
            }
            gemm(b, m, hd, scale, (ds, m, 1), (&k.data()[off..], d, 1), 1.0, (&mut dq.data_mut()[start * d + off..], d, 1));
            gemm(m, b, hd, scale, (ds, 1, m), (&q.data()[start * d + off..], d, 1), 1.0, (&mut dk.data_mut()[off..], d, 1));
            gemm(m, b, hd, 1.0, (p, 1, m), (&dout.data()[start * d + off..], d, 1), 1.0, (&mut dv.data_mut()[off..], d, 1));
        }
    }
    (dq, dk, dv)
}
