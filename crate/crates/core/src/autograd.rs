//! Reverse-mode automatic differentiation over row-major 2-D `f64` blocks.
//!
//! A [`Tape`] records one forward evaluation. Every tensor in the model is a
//! matrix whose rows are tokens (patches) and whose columns are features, so
//! the op set is small: dense products, elementwise maps, row gathers, the two
//! structured mixing ops (grouped attention and graph propagation), the prompt
//! bank and the masked L1 loss. Gradients are only computed for nodes that
//! transitively depend on a leaf created with `requires_grad = true`.

use std::rc::Rc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row layout for grouped self-attention: every group is an ordered list of
/// row indices that attend to each other. All groups share one optional
/// bucket matrix (indexed by position within the group) selecting a row of
/// the learnable bias table.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub groups: Vec<Vec<usize>>,
    pub heads: usize,
    pub bias_buckets: Option<Array2<usize>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Blend { gate: Var, a: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, rstd: Array1<f64> },
    SelectRows { x: Var, idx: Rc<Vec<Option<usize>>> },
    ConcatRows(Var, Var),
    GraphMix { x: Var, mat: Rc<Array2<f64>>, steps: usize },
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, layout: Rc<AttentionLayout>, probs: Vec<Array2<f64>> },
    Prompt { h: Var, p: Var, active: Array2<f64>, sig: Array2<f64> },
    MaskedL1 { pred: Var, target: Rc<Array2<f64>>, rows: Rc<Vec<usize>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node (input or parameter).
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Shapes `(groups, group_len)` of every attention op on the tape, in order.
    pub fn attention_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { layout, probs, .. } => {
                    let len = probs.first().map(|p| p.nrows()).unwrap_or(0);
                    Some((layout.groups.len(), len, len))
                }
                _ => None,
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `x[r, :] + bias[0, :]` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.nrows(), 1, "row bias must have one row");
        let value = self.value(x) + &b.row(0);
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddRow(x, bias), rg)
    }

    /// `x · w + b`, with `b` a single row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// `gate ⊙ a + (1 − gate) ⊙ b`.
    pub fn blend(&mut self, gate: Var, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = av - bv;
        value *= self.value(gate);
        value += bv;
        // keep ulp-level rounding inside the closed interval spanned by a and b
        Zip::from(&mut value).and(av).and(bv).for_each(|v, &a, &b| *v = v.clamp(a.min(b), a.max(b)));
        let rg = self.rg(gate) || self.rg(a) || self.rg(b);
        self.push(value, Op::Blend { gate, a, b }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Array1::zeros(xv.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / cols;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let value = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Row gather; `None` entries produce zero rows.
    pub fn select_rows(&mut self, x: Var, idx: Rc<Vec<Option<usize>>>) -> Var {
        let xv = self.value(x);
        let mut value = Array2::zeros((idx.len(), xv.ncols()));
        for (mut row, src) in value.rows_mut().into_iter().zip(idx.iter()) {
            if let Some(src) = *src {
                row.assign(&xv.row(src));
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::SelectRows { x, idx }, rg)
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        self.select_rows(x, Rc::new(idx.iter().map(|&i| Some(i)).collect()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatRows(a, b), rg)
    }

    /// Node-major layout (`row = node * steps + step`): for every step,
    /// `out[i] = Σ_j mat[i, j] · x[j]`.
    pub fn graph_mix(&mut self, x: Var, mat: Rc<Array2<f64>>, steps: usize) -> Var {
        let xv = self.value(x);
        let n = mat.nrows();
        assert_eq!(mat.ncols(), n);
        assert_eq!(xv.nrows(), n * steps, "graph_mix: row count");
        let mut value = Array2::zeros(xv.dim());
        for i in 0..n {
            for j in 0..n {
                let w = mat[[i, j]];
                if w == 0.0 {
                    continue;
                }
                let mut dst = value.slice_mut(s![i * steps..(i + 1) * steps, ..]);
                dst.scaled_add(w, &xv.slice(s![j * steps..(j + 1) * steps, ..]));
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::GraphMix { x, mat, steps }, rg)
    }

    /// Multi-head scaled dot-product attention within each group of rows.
    /// `bias`, when given, is a `[buckets, heads]` table added to the logits.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, layout: Rc<AttentionLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let heads = layout.heads;
        assert_eq!(d % heads, 0, "head count must divide width");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let table = bias.map(|b| self.value(b));
        let mut value = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(layout.groups.len() * heads);
        for group in &layout.groups {
            let n = group.len();
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                let qg = gather_block(qv, group, cols.clone());
                let kg = gather_block(kv, group, cols.clone());
                let vg = gather_block(vv, group, cols.clone());
                let mut scores = qg.dot(&kg.t()) * scale;
                if let (Some(table), Some(buckets)) = (table, layout.bias_buckets.as_ref()) {
                    for a in 0..n {
                        for b in 0..n {
                            scores[[a, b]] += table[[buckets[[a, b]], h]];
                        }
                    }
                }
                softmax_rows(&mut scores);
                let out = scores.dot(&vg);
                for (a, &row) in group.iter().enumerate() {
                    value.slice_mut(s![row, cols.clone()]).assign(&out.row(a));
                }
                probs.push(scores);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        self.push(value, Op::Attention { q, k, v, bias, layout, probs }, rg)
    }

    /// Prompt bank: `out = h + Σ_j α_j p_j` with `α_j = σ(h·p_j)` when it
    /// exceeds `threshold`, otherwise zero. Evaluated independently per row.
    pub fn prompt(&mut self, h: Var, p: Var, threshold: f64) -> Var {
        let hv = self.value(h);
        let pv = self.value(p);
        let sig = hv.dot(&pv.t()).mapv(sigmoid);
        let active = sig.mapv(|s| if s > threshold { 1.0 } else { 0.0 });
        let alpha = &sig * &active;
        let value = hv + &alpha.dot(pv);
        let rg = self.rg(h) || self.rg(p);
        self.push(value, Op::Prompt { h, p, active, sig }, rg)
    }

    /// Mean absolute error between `pred[rows]` and `target[rows]` over all
    /// columns. Rows outside `rows` contribute neither value nor gradient.
    pub fn masked_l1(&mut self, pred: Var, target: Rc<Array2<f64>>, rows: Rc<Vec<usize>>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "masked_l1: shape mismatch");
        assert!(!rows.is_empty(), "masked_l1: empty evaluation set");
        let count = (rows.len() * pv.ncols()) as f64;
        let mut total = 0.0;
        for &r in rows.iter() {
            total += pv.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        let value = Array2::from_elem((1, 1), total / count);
        let rg = self.rg(pred);
        self.push(value, Op::MaskedL1 { pred, target, rows }, rg)
    }

    /// Back-propagate from scalar node `out` with seed gradient `seed`.
    pub fn backward_with_seed(&mut self, out: Var, seed: f64) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        if !self.rg(out) {
            return;
        }
        self.grads[out.0] = Some(Array2::from_elem((1, 1), seed));
        for idx in (0..=out.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    pub fn backward(&mut self, out: Var) {
        self.backward_with_seed(out, 1.0);
    }

    fn accumulate(&mut self, v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Array2<f64>) {
        // Split borrow: ops are read from `nodes`, gradients written to `grads`.
        let node = &self.nodes[idx];
        let mut updates: Vec<(Var, Array2<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    updates.push((*a, g.dot(&self.value(*b).t())));
                }
                if self.rg(*b) {
                    updates.push((*b, self.value(*a).t().dot(g)));
                }
            }
            Op::Add(a, b) => {
                updates.push((*a, g.clone()));
                updates.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, g.clone()));
                updates.push((*b, -g));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    updates.push((*a, g * self.value(*b)));
                }
                if self.rg(*b) {
                    updates.push((*b, g * self.value(*a)));
                }
            }
            Op::AddRow(x, b) => {
                updates.push((*x, g.clone()));
                if self.rg(*b) {
                    updates.push((*b, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(y).for_each(|gx, &y| *gx *= y * (1.0 - y));
                updates.push((*x, gx));
            }
            Op::Gelu(x) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*x)).for_each(|gx, &x| *gx *= gelu_grad(x));
                updates.push((*x, gx));
            }
            Op::Blend { gate, a, b } => {
                let z = self.value(*gate);
                if self.rg(*gate) {
                    let diff = self.value(*a) - self.value(*b);
                    updates.push((*gate, g * &diff));
                }
                if self.rg(*a) {
                    updates.push((*a, g * z));
                }
                if self.rg(*b) {
                    updates.push((*b, g * &z.mapv(|z| 1.0 - z)));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).row(0).to_owned();
                if self.rg(*gamma) {
                    updates.push((*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
                if self.rg(*beta) {
                    updates.push((*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
                if self.rg(*x) {
                    let cols = g.ncols() as f64;
                    let gh = g * &gam;
                    let mut gx = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let ghr = gh.row(r);
                        let xr = xhat.row(r);
                        let mean_g = ghr.sum() / cols;
                        let mean_gx = ghr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols;
                        let rs = rstd[r];
                        for c in 0..g.ncols() {
                            gx[[r, c]] = rs * (ghr[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    updates.push((*x, gx));
                }
            }
            Op::SelectRows { x, idx } => {
                let mut gx = Array2::zeros(self.value(*x).dim());
                for (row, src) in idx.iter().enumerate() {
                    if let Some(src) = *src {
                        let mut dst = gx.row_mut(src);
                        dst += &g.row(row);
                    }
                }
                updates.push((*x, gx));
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).nrows();
                updates.push((*a, g.slice(s![..na, ..]).to_owned()));
                updates.push((*b, g.slice(s![na.., ..]).to_owned()));
            }
            Op::GraphMix { x, mat, steps } => {
                let n = mat.nrows();
                let steps = *steps;
                let mut gx = Array2::zeros(g.dim());
                for i in 0..n {
                    for j in 0..n {
                        let w = mat[[i, j]];
                        if w == 0.0 {
                            continue;
                        }
                        let mut dst = gx.slice_mut(s![j * steps..(j + 1) * steps, ..]);
                        dst.scaled_add(w, &g.slice(s![i * steps..(i + 1) * steps, ..]));
                    }
                }
                updates.push((*x, gx));
            }
            Op::Attention { q, k, v, bias, layout, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let heads = layout.heads;
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut gq = Array2::zeros(qv.dim());
                let mut gk = Array2::zeros(kv.dim());
                let mut gv = Array2::zeros(vv.dim());
                let bias_rg = bias.is_some_and(|b| self.rg(b));
                let mut gbias = bias.map(|b| Array2::<f64>::zeros(self.value(b).dim()));
                let mut pi = 0;
                for group in &layout.groups {
                    let n = group.len();
                    for h in 0..heads {
                        let cols = h * dk..(h + 1) * dk;
                        let p = &probs[pi];
                        pi += 1;
                        let qg = gather_block(qv, group, cols.clone());
                        let kg = gather_block(kv, group, cols.clone());
                        let vg = gather_block(vv, group, cols.clone());
                        let go = gather_block(g, group, cols.clone());
                        let dv = p.t().dot(&go);
                        let dp = go.dot(&vg.t());
                        let mut ds = dp;
                        for a in 0..n {
                            let dot: f64 = (0..n).map(|b| ds[[a, b]] * p[[a, b]]).sum();
                            for b in 0..n {
                                ds[[a, b]] = p[[a, b]] * (ds[[a, b]] - dot);
                            }
                        }
                        if bias_rg {
                            if let (Some(gb), Some(buckets)) = (gbias.as_mut(), layout.bias_buckets.as_ref()) {
                                for a in 0..n {
                                    for b in 0..n {
                                        gb[[buckets[[a, b]], h]] += ds[[a, b]];
                                    }
                                }
                            }
                        }
                        let dq = ds.dot(&kg) * scale;
                        let dkm = ds.t().dot(&qg) * scale;
                        for (a, &row) in group.iter().enumerate() {
                            let mut r = gq.slice_mut(s![row, cols.clone()]);
                            r += &dq.row(a);
                            let mut r = gk.slice_mut(s![row, cols.clone()]);
                            r += &dkm.row(a);
                            let mut r = gv.slice_mut(s![row, cols.clone()]);
                            r += &dv.row(a);
                        }
                    }
                }
                updates.push((*q, gq));
                updates.push((*k, gk));
                updates.push((*v, gv));
                if let (Some(b), Some(gb)) = (bias, gbias) {
                    updates.push((*b, gb));
                }
            }
            Op::Prompt { h, p, active, sig } => {
                let pv = self.value(*p);
                let hv = self.value(*h);
                let alpha = sig * active;
                // d out / d s through the active sigmoid terms only.
                let mut ds = g.dot(&pv.t());
                Zip::from(&mut ds).and(sig).and(active).for_each(|d, &s, &a| *d *= a * s * (1.0 - s));
                if self.rg(*h) {
                    updates.push((*h, g + &ds.dot(pv)));
                }
                if self.rg(*p) {
                    updates.push((*p, alpha.t().dot(g) + ds.t().dot(hv)));
                }
            }
            Op::MaskedL1 { pred, target, rows } => {
                let pv = self.value(*pred);
                let count = (rows.len() * pv.ncols()) as f64;
                let scale = g[[0, 0]] / count;
                let mut gp = Array2::zeros(pv.dim());
                for &r in rows.iter() {
                    for c in 0..pv.ncols() {
                        let diff = pv[[r, c]] - target[[r, c]];
                        gp[[r, c]] = scale * sign(diff);
                    }
                }
                updates.push((*pred, gp));
            }
        }
        for (v, gv) in updates {
            self.accumulate(v, gv);
        }
    }
}

fn gather_block(x: &Array2<f64>, rows: &[usize], cols: std::ops::Range<usize>) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), cols.len()));
    for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&x.slice(s![r, cols.clone()]));
    }
    out
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Central finite-difference gradient of `f` at `x`, perturbing every entry.
pub fn finite_difference<F>(x: ArrayView2<f64>, eps: f64, mut f: F) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut probe = x.to_owned();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..probe.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + eps;
        let up = f(&probe);
        probe[[r, c]] = orig - eps;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * eps);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, rtol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= rtol * x.abs().max(y.abs()) + 1e-9, "{x} vs {y}");
        }
    }

    // Checks d(sum(w ⊙ f(x)))/dx against finite differences for a unary builder.
    fn check_unary(x0: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone(), true);
            let y = build(&mut t, xv);
            let (r, c) = t.shape(y);
            let w = t.constant(random(r, c, 99));
            let prod = t.mul(y, w);
            let ones_l = t.constant(Array2::ones((1, r)));
            let ones_r = t.constant(Array2::ones((c, 1)));
            let a = t.matmul(ones_l, prod);
            let s = t.matmul(a, ones_r);
            (t, xv, s)
        };
        let (mut t, xv, s) = eval(&x0);
        t.backward(s);
        let analytic = t.grad(xv).unwrap().clone();
        let numeric = finite_difference(x0.view(), 1e-6, |x| {
            let (t, _, s) = eval(x);
            t.scalar(s)
        });
        close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_unary(random(3, 4, 1), |t, x| t.sigmoid(x));
        check_unary(random(3, 4, 2), |t, x| t.gelu(x));
        check_unary(random(3, 4, 3), |t, x| {
            let y = t.sigmoid(x);
            t.mul(x, y)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let gamma = random(1, 5, 7);
        let beta = random(1, 5, 8);
        check_unary(random(4, 5, 4), move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            t.layer_norm(x, g, b)
        });
    }

    #[test]
    fn attention_gradient_all_inputs() {
        let layout = Rc::new(AttentionLayout {
            groups: vec![vec![0, 2, 4], vec![1, 3, 5]],
            heads: 2,
            bias_buckets: Some(array![[0, 1, 2], [1, 0, 1], [2, 1, 0]]),
        });
        let table = random(3, 2, 11);
        let l = layout.clone();
        let t2 = table.clone();
        check_unary(random(6, 4, 5), move |t, x| {
            let b = t.constant(t2.clone());
            t.attention(x, x, x, Some(b), l.clone())
        });
        // bias table gradient
        let x = random(6, 4, 6);
        check_unary(table, move |t, b| {
            let xv = t.constant(x.clone());
            t.attention(xv, xv, xv, Some(b), layout.clone())
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mat = Rc::new(random(3, 3, 20));
        check_unary(random(6, 2, 21), move |t, x| t.graph_mix(x, mat.clone(), 2));
        check_unary(random(4, 3, 22), |t, x| t.select_rows(x, Rc::new(vec![Some(3), None, Some(0), Some(3)])));
        check_unary(random(2, 3, 23), |t, x| {
            let y = t.sigmoid(x);
            t.concat_rows(x, y)
        });
        let bias = random(1, 3, 24);
        check_unary(random(4, 3, 25), move |t, x| {
            let b = t.leaf(bias.clone(), true);
            let y = t.add_row(x, b);
            let z = t.sigmoid(y);
            t.blend(z, x, y)
        });
    }

    #[test]
    fn prompt_gradient_wrt_both_inputs() {
        // threshold far from all sigmoid values: cutoff hinge is not crossed
        let p = random(3, 4, 30) * 0.8;
        let p2 = p.clone();
        check_unary(random(5, 4, 31), move |t, h| {
            let pv = t.constant(p2.clone());
            t.prompt(h, pv, 0.5)
        });
        let h = random(5, 4, 32);
        check_unary(p, move |t, pv| {
            let hv = t.constant(h.clone());
            t.prompt(hv, pv, 0.5)
        });
    }

    #[test]
    fn masked_l1_touches_only_listed_rows() {
        let mut t = Tape::new();
        let pred = t.leaf(array![[1.0, 2.0], [3.0, 4.0]], true);
        let target = Rc::new(array![[0.0, 0.0], [5.0, 5.0]]);
        let loss = t.masked_l1(pred, target, Rc::new(vec![1]));
        assert_eq!(t.scalar(loss), 1.5);
        t.backward(loss);
        assert_eq!(t.grad(pred).unwrap(), &array![[0.0, 0.0], [-0.5, -0.5]]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(random(2, 2, 40), false);
        let w = t.leaf(random(2, 2, 41), true);
        let y = t.matmul(x, w);
        let target = Rc::new(Array2::zeros((2, 2)));
        let loss = t.masked_l1(y, target, Rc::new(vec![0, 1]));
        t.backward(loss);
        assert!(t.grad(x).is_none());
        assert!(t.grad(w).is_some());
    }
}
