//! Reverse-mode differentiation over a per-trial computation graph.
//!
//! The tape records every operation of one forward pass; `backward` walks the
//! nodes in reverse and accumulates gradients into the trainable leaves.
//! Nodes that no trainable leaf feeds into are skipped during the backward
//! sweep.

use super::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    MinElem(NodeId, NodeId),
    LogSoftmaxRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SumAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf: data the loss does not differentiate through.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::add(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = tensor::add_row(self.value(a), self.value(row));
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::sub(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::mul(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    /// k*a + c elementwise.
    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        let v = tensor::affine(self.value(a), k, c);
        let g = self.ng(a);
        self.push(v, Op::Affine(a, k, c), g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = tensor::tanh(self.value(a));
        let g = self.ng(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(a));
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = tensor::exp(self.value(a));
        let g = self.ng(a);
        self.push(v, Op::Exp(a), g)
    }

    /// Gradient is passed only strictly inside the bounds.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = tensor::clamp(self.value(a), lo, hi);
        let g = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::min_elem(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MinElem(a, b), g)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = tensor::log_softmax_rows(self.value(a));
        let g = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), g)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let v = tensor::gather_rows(self.value(a), &idx);
        let g = self.ng(a);
        self.push(v, Op::GatherRows(a, idx), g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sum_all(self.value(a));
        let g = self.ng(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Backpropagates from a scalar root. Returns per-node gradients (None for
    /// nodes outside the differentiable cone).
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(a) {
                        let da = tensor::matmul_nt(&g, self.value(b));
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.ng(b) {
                        let db = tensor::matmul_tn(self.value(a), &g);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(row) {
                        let mut dr = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                dr.data[c] += g.get(r, c);
                            }
                        }
                        accumulate(&mut grads[row.0], dr);
                    }
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], tensor::affine(&g, -1.0, 0.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], tensor::mul(&g, self.value(b)));
                    }
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], tensor::mul(&g, self.value(a)));
                    }
                }
                Op::Affine(a, k, _) => {
                    accumulate(&mut grads[a.0], tensor::affine(&g, k, 0.0));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let d = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, d));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let d = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, d));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads[a.0], tensor::mul(&g, y));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(a);
                    let d = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, xv)| if *xv > lo && *xv < hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, d));
                }
                Op::MinElem(a, b) => {
                    let (xa, xb) = (self.value(a), self.value(b));
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    let mut db = Tensor::zeros(g.rows, g.cols);
                    for j in 0..g.data.len() {
                        if xb.data[j] < xa.data[j] {
                            db.data[j] = g.data[j];
                        } else {
                            da.data[j] = g.data[j];
                        }
                    }
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    // d/dx_j = g_j - softmax(x)_j * sum(g)
                    let y = &self.nodes[i].value;
                    let mut d = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let gs: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols {
                            let p = y.get(r, c).exp();
                            d.set(r, c, g.get(r, c) - p * gs);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::GatherRows(a, ref idx) => {
                    let src = self.value(a);
                    let mut d = Tensor::zeros(src.rows, src.cols);
                    for (r, &c) in idx.iter().enumerate() {
                        d.data[r * src.cols + c] = g.data[r];
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::SumAll(a) => {
                    let src = self.value(a);
                    let d = Tensor::from_vec(
                        src.rows,
                        src.cols,
                        vec![g.data[0]; src.rows * src.cols],
                    );
                    accumulate(&mut grads[a.0], d);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            debug_assert!(g.same_shape(&delta));
            for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                *gv += dv;
            }
        }
        None => *slot = Some(delta),
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; zero tensor of matching shape when the node never
    /// received gradient.
    pub fn of(&self, id: NodeId, like: &Tensor) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.rows, like.cols),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn chain_matches_finite_differences() {
        // f(w) = sum(tanh(x @ w) * sigmoid(x @ w)) on a 2x3 @ 3x2 graph.
        let x = Tensor::from_vec(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.75, -0.5]);
        let w0 = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        let mut f = |w: &[f64]| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let wn = tape.param(Tensor::from_vec(3, 2, w.to_vec()));
            let y = tape.matmul(xn, wn);
            let t = tape.tanh(y);
            let s = tape.sigmoid(y);
            let m = tape.mul(t, s);
            let out = tape.sum_all(m);
            tape.value(out).data[0]
        };
        let numeric = num_grad(&mut f, &w0, 1e-6);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wt = Tensor::from_vec(3, 2, w0.clone());
        let wn = tape.param(wt.clone());
        let y = tape.matmul(xn, wn);
        let t = tape.tanh(y);
        let s = tape.sigmoid(y);
        let m = tape.mul(t, s);
        let out = tape.sum_all(m);
        let grads = tape.backward(out);
        let analytic = grads.of(wn, &wt);

        for (a, n) in analytic.data.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn log_softmax_gather_grad() {
        let w0 = vec![0.2, -0.4, 0.9, 0.05];
        let mut f = |w: &[f64]| {
            let mut tape = Tape::new();
            let wn = tape.param(Tensor::from_vec(2, 2, w.to_vec()));
            let ls = tape.log_softmax_rows(wn);
            let picked = tape.gather_rows(ls, vec![1, 0]);
            let out = tape.sum_all(picked);
            tape.value(out).data[0]
        };
        let numeric = num_grad(&mut f, &w0, 1e-6);

        let mut tape = Tape::new();
        let wt = Tensor::from_vec(2, 2, w0.clone());
        let wn = tape.param(wt.clone());
        let ls = tape.log_softmax_rows(wn);
        let picked = tape.gather_rows(ls, vec![1, 0]);
        let out = tape.sum_all(picked);
        let grads = tape.backward(out);
        let analytic = grads.of(wn, &wt);
        for (a, n) in analytic.data.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn clamp_blocks_gradient_outside_bounds() {
        let mut tape = Tape::new();
        let wt = Tensor::from_vec(1, 3, vec![0.5, 2.0, -3.0]);
        let wn = tape.param(wt.clone());
        let c = tape.clamp(wn, 0.0, 1.0);
        let out = tape.sum_all(c);
        let grads = tape.backward(out);
        let g = grads.of(wn, &wt);
        assert_eq!(g.data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let p = tape.param(Tensor::scalar(3.0));
        let m = tape.mul(c, p);
        let out = tape.sum_all(m);
        let grads = tape.backward(out);
        assert_eq!(grads.of(p, &Tensor::scalar(0.0)).data[0], 2.0);
        assert!(!tape.ng(c));
    }
}
