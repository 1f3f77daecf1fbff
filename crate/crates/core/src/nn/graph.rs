//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. [`Graph::backward`] then walks the nodes in reverse creation
//! order (a valid reverse topological order) and accumulates adjoints into
//! every node that depends on a trainable leaf. Graphs are built per step
//! and dropped afterwards; there is no global state.

use super::params::{Gradients, ParamSet};
use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Graph nodes of a bound [`ParamSet`], one per slot.
#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    #[inline]
    pub fn id(&self, slot: usize) -> NodeId {
        self.0[slot]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddTiled(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Tensor),
    AffineCols(NodeId, Vec<f64>),
    Gelu(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    MaxConst(NodeId, Vec<bool>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        seq_len: usize,
        probs: Vec<f64>,
    },
    StackTokens {
        state: NodeId,
        actions: NodeId,
        h: usize,
    },
    DropFirstToken(NodeId, usize),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Adds every tensor of `params` as a leaf. Frozen sets become constants.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Bound {
        Bound(
            params
                .tensors()
                .iter()
                .map(|t| self.push(t.clone(), Op::Leaf, trainable))
                .collect(),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `x [n x m] + b [1 x m]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1);
        assert_eq!(xv.cols(), bv.cols());
        let mut out = xv.clone();
        let m = out.cols();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    /// `x [(n*p) x m] + tile(t [p x m])`: row `r` receives `t[r % p]`.
    pub fn add_tiled(&mut self, x: NodeId, t: NodeId) -> NodeId {
        let xv = self.value(x);
        let tv = self.value(t);
        assert_eq!(xv.cols(), tv.cols());
        assert_eq!(xv.rows() % tv.rows(), 0);
        let (p, m) = tv.shape();
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(m).enumerate() {
            let trow = tv.row_slice(r % p);
            for (o, &tt) in row.iter_mut().zip(trow) {
                *o += tt;
            }
        }
        let rg = self.rg(x) || self.rg(t);
        self.push(out, Op::AddTiled(x, t), rg)
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            av.rows(),
            av.cols(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant tensor (masks, weights).
    pub fn mul_const(&mut self, x: NodeId, c: Tensor) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.shape(), c.shape(), "mul_const shape mismatch");
        let v = Tensor::from_vec(
            xv.rows(),
            xv.cols(),
            xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect(),
        );
        let rg = self.rg(x);
        self.push(v, Op::MulConst(x, c), rg)
    }

    /// `x[:, c] * scale[c] + shift[c]`.
    pub fn affine_cols(&mut self, x: NodeId, scale: &[f64], shift: &[f64]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.cols(), scale.len());
        assert_eq!(xv.cols(), shift.len());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(scale.len()) {
            for ((o, s), t) in row.iter_mut().zip(scale).zip(shift) {
                *o = *o * s + t;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AffineCols(x, scale.to_vec()), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * a);
        let rg = self.rg(x);
        self.push(v, Op::Square(x), rg)
    }

    /// `max(x, c)` against a constant. The adjoint flows to `x` only where
    /// `x >= c`.
    pub fn max_const(&mut self, x: NodeId, c: &Tensor) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.shape(), c.shape(), "max_const shape mismatch");
        let mask: Vec<bool> = xv.data().iter().zip(c.data()).map(|(a, b)| a >= b).collect();
        let v = Tensor::from_vec(
            xv.rows(),
            xv.cols(),
            xv.data()
                .iter()
                .zip(c.data())
                .map(|(&a, &b)| if a >= b { a } else { b })
                .collect(),
        );
        let rg = self.rg(x);
        self.push(v, Op::MaxConst(x, mask), rg)
    }

    /// Scaled dot-product attention over consecutive sequences of
    /// `seq_len` rows. With `causal`, scores above the diagonal receive an
    /// additive `-inf` before the softmax.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, seq_len: usize, causal: bool) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.shape(), kv.shape());
        assert_eq!(qv.rows(), vv.rows());
        assert_eq!(qv.rows() % seq_len, 0);
        let d = qv.cols();
        let dv = vv.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let n_seq = qv.rows() / seq_len;
        let mut probs = vec![0.0; n_seq * seq_len * seq_len];
        let mut out = Tensor::zeros(qv.rows(), dv);
        let mut scores = vec![0.0; seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for i in 0..seq_len {
                let qi = qv.row_slice(base + i);
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mask = if causal && j > i { f64::NEG_INFINITY } else { 0.0 };
                    *sc = dot(qi, kv.row_slice(base + j)) * scale + mask;
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let p = &mut probs[(base + i) * seq_len..(base + i + 1) * seq_len];
                let mut z = 0.0;
                for (pj, &sc) in p.iter_mut().zip(&scores) {
                    *pj = (sc - m).exp();
                    z += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= z;
                }
                let orow = &mut out.data_mut()[(base + i) * dv..(base + i + 1) * dv];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    for (o, &vj) in orow.iter_mut().zip(vv.row_slice(base + j)) {
                        *o += pj * vj;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                probs,
            },
            rg,
        )
    }

    /// Interleaves one state token with `h` action tokens per sample:
    /// `[s_0, a_00..a_0h-1, s_1, ...]`.
    pub fn stack_tokens(&mut self, state: NodeId, actions: NodeId, h: usize) -> NodeId {
        let sv = self.value(state);
        let av = self.value(actions);
        assert_eq!(sv.cols(), av.cols());
        assert_eq!(sv.rows() * h, av.rows());
        let (b, w) = sv.shape();
        let mut data = Vec::with_capacity(b * (h + 1) * w);
        for i in 0..b {
            data.extend_from_slice(sv.row_slice(i));
            for j in 0..h {
                data.extend_from_slice(av.row_slice(i * h + j));
            }
        }
        let rg = self.rg(state) || self.rg(actions);
        self.push(
            Tensor::from_vec(b * (h + 1), w, data),
            Op::StackTokens { state, actions, h },
            rg,
        )
    }

    /// Removes token 0 of every sequence of `seq_len` rows.
    pub fn drop_first_token(&mut self, x: NodeId, seq_len: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows() % seq_len, 0);
        let n = xv.rows() / seq_len;
        let w = xv.cols();
        let mut data = Vec::with_capacity(n * (seq_len - 1) * w);
        for s in 0..n {
            for j in 1..seq_len {
                data.extend_from_slice(xv.row_slice(s * seq_len + j));
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(n * (seq_len - 1), w, data),
            Op::DropFirstToken(x, seq_len),
            rg,
        )
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(x).clone().reshaped(rows, cols);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (rows, cols) = self.value(loss).shape();
        if rows * cols != 1 {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Temporarily move the op out to appease the borrow checker.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_op(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &Tensor) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    let ga = g.matmul_nt(self.value(b));
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let gb = self.value(a).matmul_tn(g);
                    self.accumulate(b, gb);
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(b) {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(b, Tensor::from_vec(1, m, gb));
                }
                self.accumulate(x, g.clone());
            }
            Op::AddTiled(x, t) => {
                if self.rg(t) {
                    let (p, m) = self.value(t).shape();
                    let mut gt = Tensor::zeros(p, m);
                    for (r, row) in g.data().chunks(m).enumerate() {
                        let dst = &mut gt.data_mut()[(r % p) * m..(r % p + 1) * m];
                        for (o, v) in dst.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(t, gt);
                }
                self.accumulate(x, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                if self.rg(b) {
                    self.accumulate(b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = zip(g, self.value(b), |x, y| x * y);
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let gb = zip(g, self.value(a), |x, y| x * y);
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(x, c) => self.accumulate(x, g.map(|v| v * c)),
            Op::MulConst(x, ref c) => {
                let gx = zip(g, c, |x, y| x * y);
                self.accumulate(x, gx);
            }
            Op::AffineCols(x, ref scale) => {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(scale.len()) {
                    for (o, s) in row.iter_mut().zip(scale) {
                        *o *= s;
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Gelu(x) => {
                let gx = zip(g, self.value(x), |gv, xv| gv * gelu_grad(xv));
                self.accumulate(x, gx);
            }
            Op::Tanh(x) => {
                let gx = zip(g, &self.nodes[i].value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(x, gx);
            }
            Op::Square(x) => {
                let gx = zip(g, self.value(x), |gv, xv| 2.0 * gv * xv);
                self.accumulate(x, gx);
            }
            Op::MaxConst(x, ref mask) => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v } else { 0.0 })
                    .collect();
                self.accumulate(x, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                ref probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(q, k, v, seq_len, probs, g);
                self.accumulate(q, gq);
                self.accumulate(k, gk);
                self.accumulate(v, gv);
            }
            Op::StackTokens { state, actions, h } => {
                let w = g.cols();
                let b = g.rows() / (h + 1);
                let mut gs = Vec::with_capacity(b * w);
                let mut ga = Vec::with_capacity(b * h * w);
                for s in 0..b {
                    gs.extend_from_slice(g.row_slice(s * (h + 1)));
                    for j in 0..h {
                        ga.extend_from_slice(g.row_slice(s * (h + 1) + 1 + j));
                    }
                }
                self.accumulate(state, Tensor::from_vec(b, w, gs));
                self.accumulate(actions, Tensor::from_vec(b * h, w, ga));
            }
            Op::DropFirstToken(x, seq_len) => {
                let w = g.cols();
                let n = g.rows() / (seq_len - 1);
                let mut gx = Tensor::zeros(n * seq_len, w);
                for s in 0..n {
                    for j in 1..seq_len {
                        let src = g.row_slice(s * (seq_len - 1) + j - 1);
                        let r = s * seq_len + j;
                        gx.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(x).shape();
                self.accumulate(x, g.clone().reshaped(r, c));
            }
            Op::Sum(x) => {
                let (r, c) = self.value(x).shape();
                self.accumulate(x, Tensor::from_vec(r, c, vec![g.item(); r * c]));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(x).shape();
                let v = g.item() / (r * c) as f64;
                self.accumulate(x, Tensor::from_vec(r, c, vec![v; r * c]));
            }
        }
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        seq_len: usize,
        probs: &[f64],
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dv = vv.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows(), d);
        let mut gk = Tensor::zeros(kv.rows(), d);
        let mut gvv = Tensor::zeros(vv.rows(), dv);
        let n_seq = qv.rows() / seq_len;
        let mut dp = vec![0.0; seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for i in 0..seq_len {
                let p = &probs[(base + i) * seq_len..(base + i + 1) * seq_len];
                let go = g.row_slice(base + i);
                for j in 0..seq_len {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(go, vv.row_slice(base + j));
                    let dst = &mut gvv.data_mut()[(base + j) * dv..(base + j + 1) * dv];
                    for (o, &gg) in dst.iter_mut().zip(go) {
                        *o += p[j] * gg;
                    }
                }
                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..seq_len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - inner) * scale;
                    let kj = kv.row_slice(base + j);
                    let dst = &mut gq.data_mut()[(base + i) * d..(base + i + 1) * d];
                    for (o, &kk) in dst.iter_mut().zip(kj) {
                        *o += ds * kk;
                    }
                    let qi = qv.row_slice(base + i);
                    let dst = &mut gk.data_mut()[(base + j) * d..(base + j + 1) * d];
                    for (o, &qq) in dst.iter_mut().zip(qi) {
                        *o += ds * qq;
                    }
                }
            }
        }
        (gq, gk, gvv)
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Collects the adjoints of a bound set into its named layout. Slots
    /// without a gradient are zero; a non-finite entry is an error naming the
    /// parameter.
    pub fn gradients(&self, bound: &Bound, params: &ParamSet) -> Result<Gradients> {
        let mut out = ParamSet::zeros_like(params);
        for (slot, id) in bound.ids().iter().enumerate() {
            if let Some(g) = self.grad(*id) {
                *out.tensor_mut(slot) = g.clone();
            }
        }
        out.ensure_finite("gradient of")?;
        Ok(out)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}
