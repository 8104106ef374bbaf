//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order; node ids are
//! therefore a topological order and backward simply walks them in reverse.
//! Binary elementwise ops broadcast over rank-2 views: a rank-0/1 operand is a
//! single row, and any dimension of size 1 stretches to match the other side.
//!
//! Besides the numeric [`Graph::backward`], [`Graph::grad_graph`] records the
//! backward pass itself as graph nodes so gradients can be differentiated
//! again. Only the ops needed by the MLP family support this; fused kernels
//! (attention, layer norm, GELU, embedding lookup) report
//! [`SpeftError::UnsupportedSecondOrder`].

mod hvp;

pub use hvp::{
    gradient_of, hessian_vector_product, hessian_vector_product_exact, hvp_step_size, hvp_with,
    HVP_DELTA,
};

use crate::error::{Result, SpeftError};
use crate::tensor::{matmul_at_into, matmul_bt_into, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Abs(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Mse(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumTo(Var),
    BroadcastTo(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
    },
    MeanPool {
        x: Var,
        batch: usize,
        seq: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Neg(..) => "neg",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumTo(..) => "sum_to",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Attention { .. } => "attention",
            Op::MeanPool { .. } => "mean_pool",
        }
    }
}

/// Layout of a fused multi-head attention call over `batch` sequences of
/// `seq` tokens, flattened to `[batch * seq, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Op-specific forward state reused by backward (softmax probabilities,
    /// inverse standard deviations).
    saved: Option<Tensor>,
}

/// Tape of executed operations. Single-threaded; independent graphs share
/// nothing and may live on different threads.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    consumed: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the finite-value checks (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            saved: None,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Gradient of a leaf, zeros when it was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], saved: Option<Tensor>) -> Result<Var> {
        if self.check_finite {
            let inputs_finite = parents.iter().all(|p| self.nodes[p.0].value.is_finite());
            if !inputs_finite || !value.is_finite() {
                return Err(SpeftError::NonFinite { op: op.name() });
            }
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], None)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).scale(factor);
        self.push(out, Op::Scale(a, factor), &[a], None)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), &[a], None)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a], None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a], None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a], None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a], None)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a], None)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = *x.shape().last().unwrap_or(&1);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push(out, Op::Softmax(a), &[a], None)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part;
    /// compose with `mul`/`add` against gain and bias vectors).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = *x.shape().last().unwrap_or(&1);
        let rows = x.numel() / cols.max(1);
        let mut out = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in x.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push(out, Op::LayerNorm(a), &[a], Some(Tensor::vector(inv_std)))
    }

    /// Gathers rows of a `[vocab, width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, width) = match t.shape() {
            [v, w] => (*v, *w),
            s => {
                return Err(SpeftError::ShapeMismatch {
                    op: "embedding",
                    lhs: s.to_vec(),
                    rhs: vec![ids.len()],
                })
            }
        };
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(SpeftError::ShapeMismatch {
                    op: "embedding",
                    lhs: t.shape().to_vec(),
                    rhs: vec![id],
                });
            }
            out.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        let out = Tensor::new(vec![ids.len(), width], out)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            None,
        )
    }

    /// Mean cross-entropy of `[n, classes]` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, c) = match x.shape() {
            [n, c] if *n == targets.len() && *n > 0 => (*n, *c),
            [c] if targets.len() == 1 => (1, *c),
            s => {
                return Err(SpeftError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: s.to_vec(),
                    rhs: vec![targets.len()],
                })
            }
        };
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            if t >= c {
                return Err(SpeftError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: vec![n, c],
                    rhs: vec![t],
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let saved = Tensor::new(vec![n, c], probs)?;
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
            Some(saved),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(SpeftError::ShapeMismatch {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let n = p.numel().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::Mse(pred, target), &[pred, target], None)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], None)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), &[a], None)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a], None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.numel().max(1) as f64);
        self.push(out, Op::Mean(a), &[a], None)
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = reduce_to(self.value(a), shape)?;
        self.push(out, Op::SumTo(a), &[a], None)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = broadcast_to(self.value(a), shape)?;
        self.push(out, Op::BroadcastTo(a), &[a], None)
    }

    /// Fused scaled dot-product multi-head attention over `[batch*seq, width]`
    /// projections. Returns the concatenated head outputs, same shape as `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let AttentionShape {
            batch,
            seq,
            heads,
            causal,
        } = shape;
        let mismatch = || SpeftError::ShapeMismatch {
            op: "attention",
            lhs: qt.shape().to_vec(),
            rhs: vec![batch, seq, heads],
        };
        let width = match qt.shape() {
            [r, w] if *r == batch * seq && heads > 0 && w % heads == 0 => *w,
            _ => return Err(mismatch()),
        };
        if kt.shape() != qt.shape() || vt.shape() != qt.shape() {
            return Err(mismatch());
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * width + h * dh..][..dh];
                    let visible = if causal { i + 1 } else { seq };
                    let row = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for (j, p) in row.iter_mut().enumerate().take(visible) {
                        let kj = &kd[(b * seq + j) * width + h * dh..][..dh];
                        *p = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    softmax_in_place(&mut row[..visible]);
                    let orow = &mut out[(b * seq + i) * width + h * dh..][..dh];
                    for (j, &p) in row.iter().enumerate().take(visible) {
                        let vj = &vd[(b * seq + j) * width + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(qt.shape().to_vec(), out)?;
        let saved = Tensor::new(vec![batch, heads, seq, seq], probs)?;
        self.push(
            out,
            Op::Attention { q, k, v, shape },
            &[q, k, v],
            Some(saved),
        )
    }

    /// Averages `[batch*seq, width]` over the sequence axis into `[batch, width]`.
    pub fn mean_pool(&mut self, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let t = self.value(x);
        let width = match t.shape() {
            [r, w] if *r == batch * seq && seq > 0 => *w,
            s => {
                return Err(SpeftError::ShapeMismatch {
                    op: "mean_pool",
                    lhs: s.to_vec(),
                    rhs: vec![batch, seq],
                })
            }
        };
        let mut out = vec![0.0; batch * width];
        for b in 0..batch {
            for s in 0..seq {
                let src = &t.data()[(b * seq + s) * width..][..width];
                for (o, v) in out[b * width..(b + 1) * width].iter_mut().zip(src) {
                    *o += v / seq as f64;
                }
            }
        }
        let out = Tensor::new(vec![batch, width], out)?;
        self.push(out, Op::MeanPool { x, batch, seq }, &[x], None)
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagates from a scalar loss, accumulating into leaf gradients, and
    /// marks the graph consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, false)
    }

    /// Like [`Graph::backward`] but keeps the graph usable for further passes.
    pub fn backward_retain(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&mut self, loss: Var, retain: bool) -> Result<()> {
        if self.consumed {
            return Err(SpeftError::GraphConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(SpeftError::NonScalarLoss(shape));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Tensor::ones(&shape));
        for id in (0..=loss.0).rev() {
            let Some(g) = adjoints[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.local_vjp(id, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adjoints[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        if !retain {
            self.consumed = true;
        }
        Ok(())
    }

    fn local_vjp(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                let mut da = vec![0.0; m * k];
                matmul_bt_into(g.data(), bt.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_at_into(at.data(), g.data(), &mut db, m, k, n);
                vec![
                    (*a, Tensor::new(vec![m, k], da)?),
                    (*b, Tensor::new(vec![k, n], db)?),
                ]
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())?),
                (*b, reduce_to(g, val(*b).shape())?),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())?),
                (*b, reduce_to(g, val(*b).shape())?.map(|x| -x)),
            ],
            Op::Mul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let ga = broadcast_binary("mul", g, bt, |x, y| x * y)?;
                let gb = broadcast_binary("mul", g, at, |x, y| x * y)?;
                vec![
                    (*a, reduce_to(&ga, at.shape())?),
                    (*b, reduce_to(&gb, bt.shape())?),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sign(x))?)],
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |g, x| 2.0 * g * x)?)],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?)],
            Op::Tanh(a) => vec![(*a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?)],
            Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * gelu_grad(x))?)],
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm(a) => {
                let xhat = &node.value;
                let inv_std = node.saved.as_ref().expect("layer norm saves inv_std");
                let cols = *xhat.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; xhat.numel()];
                for (r, ((xr, gr), dr)) in xhat
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(dx.chunks_mut(cols))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    let is = inv_std.data()[r];
                    for ((d, xv), gv) in dr.iter_mut().zip(xr).zip(gr) {
                        *d = is * (gv - mg - xv * mgx);
                    }
                }
                vec![(*a, Tensor::new(xhat.shape().to_vec(), dx)?)]
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let width = t.shape()[1];
                let mut dt = Tensor::zeros(t.shape());
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g.data()[row * width..(row + 1) * width];
                    for (d, s) in dt.data_mut()[id * width..(id + 1) * width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![(*table, dt)]
            }
            Op::CrossEntropy { logits, targets } => {
                let probs = node.saved.as_ref().expect("cross entropy saves probs");
                let c = probs.shape()[1];
                let n = targets.len() as f64;
                let scale = g.item() / n;
                let mut dx = probs.data().to_vec();
                for (row, &t) in dx.chunks_mut(c).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, Tensor::new(val(*logits).shape().to_vec(), dx)?)]
            }
            Op::Mse(p, t) => {
                let (pt, tt) = (val(*p), val(*t));
                let c = 2.0 * g.item() / pt.numel().max(1) as f64;
                let dp = pt.zip_map(tt, |a, b| c * (a - b))?;
                let dt = dp.map(|x| -x);
                vec![(*p, dp), (*t, dt)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.item() / x.numel().max(1) as f64))]
            }
            Op::SumTo(a) => vec![(*a, broadcast_to(g, val(*a).shape())?)],
            Op::BroadcastTo(a) => vec![(*a, reduce_to(g, val(*a).shape())?)],
            Op::Attention { q, k, v, shape } => {
                let probs = node.saved.as_ref().expect("attention saves probs");
                let (dq, dk, dv) = attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs.data(),
                    g.data(),
                    val(*q).shape()[1],
                    *shape,
                );
                let s = val(*q).shape().to_vec();
                vec![
                    (*q, Tensor::new(s.clone(), dq)?),
                    (*k, Tensor::new(s.clone(), dk)?),
                    (*v, Tensor::new(s, dv)?),
                ]
            }
            Op::MeanPool { x, batch, seq } => {
                let width = g.shape()[1];
                let mut dx = vec![0.0; batch * seq * width];
                for b in 0..*batch {
                    let src = &g.data()[b * width..(b + 1) * width];
                    for s in 0..*seq {
                        for (d, v) in dx[(b * seq + s) * width..][..width].iter_mut().zip(src) {
                            *d = v / *seq as f64;
                        }
                    }
                }
                vec![(*x, Tensor::new(vec![batch * seq, width], dx)?)]
            }
        };
        Ok(out)
    }

    /// Records the gradient of `loss` with respect to `wrt` as new graph nodes,
    /// so the returned vars can themselves be differentiated.
    pub fn grad_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(SpeftError::NonScalarLoss(shape));
        }
        let mut adjoints: Vec<Option<Var>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(self.constant(Tensor::ones(&shape)));
        for id in (0..=loss.0).rev() {
            let Some(g) = adjoints[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                continue;
            }
            for (parent, pg) in self.graph_vjp(id, g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                adjoints[parent.0] = Some(match adjoints[parent.0] {
                    Some(acc) => self.add(acc, pg)?,
                    None => pg,
                });
            }
        }
        wrt.iter()
            .map(|w| match adjoints.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    fn reduce_var(&mut self, g: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(g) == shape {
            Ok(g)
        } else {
            self.sum_to(g, shape)
        }
    }

    fn graph_vjp(&mut self, id: usize, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[id].op.clone();
        let node_var = Var(id);
        let out = match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, g)?;
                vec![(a, da), (b, db)]
            }
            Op::Add(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                vec![(a, self.reduce_var(g, &sa)?), (b, self.reduce_var(g, &sb)?)]
            }
            Op::Sub(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let da = self.reduce_var(g, &sa)?;
                let rb = self.reduce_var(g, &sb)?;
                vec![(a, da), (b, self.neg(rb)?)]
            }
            Op::Mul(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                vec![(a, self.reduce_var(ga, &sa)?), (b, self.reduce_var(gb, &sb)?)]
            }
            Op::Scale(a, c) => vec![(a, self.scale(g, c)?)],
            Op::Neg(a) => vec![(a, self.neg(g)?)],
            Op::Abs(a) => {
                let s = self.value(a).map(sign);
                let s = self.constant(s);
                vec![(a, self.mul(g, s)?)]
            }
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0)?;
                vec![(a, self.mul(g, two_a)?)]
            }
            Op::Relu(a) => {
                let step = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let step = self.constant(step);
                vec![(a, self.mul(g, step)?)]
            }
            Op::Tanh(a) => {
                let y2 = self.square(node_var)?;
                let gy2 = self.mul(g, y2)?;
                vec![(a, self.sub(g, gy2)?)]
            }
            Op::Softmax(a) => {
                let shape = self.shape(node_var).to_vec();
                let mut row_shape = shape.clone();
                *row_shape.last_mut().expect("softmax input has rank >= 1") = 1;
                if row_shape.len() == 1 {
                    row_shape = vec![1];
                }
                let gy = self.mul(g, node_var)?;
                let dot = self.sum_to(gy, &row_shape)?;
                let centered = self.sub(g, dot)?;
                vec![(a, self.mul(node_var, centered)?)]
            }
            Op::CrossEntropy { logits, targets } => {
                let probs = self.softmax(logits)?;
                let shape = self.shape(logits).to_vec();
                let c = *shape.last().expect("logits have rank >= 1");
                let mut onehot = Tensor::zeros(&shape);
                for (row, &t) in targets.iter().enumerate() {
                    onehot.data_mut()[row * c + t] = 1.0;
                }
                let onehot = self.constant(onehot);
                let diff = self.sub(probs, onehot)?;
                let diff = self.scale(diff, 1.0 / targets.len() as f64)?;
                vec![(logits, self.mul(diff, g)?)]
            }
            Op::Mse(p, t) => {
                let n = self.value(p).numel().max(1) as f64;
                let diff = self.sub(p, t)?;
                let diff = self.scale(diff, 2.0 / n)?;
                let dp = self.mul(diff, g)?;
                let dt = self.neg(dp)?;
                vec![(p, dp), (t, dt)]
            }
            Op::Reshape(a) => {
                let s = self.shape(a).to_vec();
                vec![(a, self.reshape(g, &s)?)]
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            Op::Sum(a) => {
                let s = self.shape(a).to_vec();
                vec![(a, self.broadcast_to(g, &s)?)]
            }
            Op::Mean(a) => {
                let s = self.shape(a).to_vec();
                let n = self.value(a).numel().max(1) as f64;
                let b = self.broadcast_to(g, &s)?;
                vec![(a, self.scale(b, 1.0 / n)?)]
            }
            Op::SumTo(a) => {
                let s = self.shape(a).to_vec();
                vec![(a, self.broadcast_to(g, &s)?)]
            }
            Op::BroadcastTo(a) => {
                let s = self.shape(a).to_vec();
                vec![(a, self.sum_to(g, &s)?)]
            }
            other => return Err(SpeftError::UnsupportedSecondOrder(other.name())),
        };
        Ok(out)
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, n) | (n, 1) => Some(n),
        _ => None,
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let mismatch = || SpeftError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let ((ra, ca), (rb, cb)) = (a.as_2d().ok_or_else(mismatch)?, b.as_2d().ok_or_else(mismatch)?);
    let rows = broadcast_dim(ra, rb).ok_or_else(mismatch)?;
    let cols = broadcast_dim(ca, cb).ok_or_else(mismatch)?;
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (ia, ib) = (if ra == 1 { 0 } else { i }, if rb == 1 { 0 } else { i });
        for j in 0..cols {
            let (ja, jb) = (if ca == 1 { 0 } else { j }, if cb == 1 { 0 } else { j });
            out.push(f(a.data()[ia * ca + ja], b.data()[ib * cb + jb]));
        }
    }
    let shape = if a.ndim() == 2 || b.ndim() == 2 {
        vec![rows, cols]
    } else {
        vec![cols]
    };
    Tensor::new(shape, out)
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let target = Tensor::zeros(shape);
    let mismatch = || SpeftError::ShapeMismatch {
        op: "sum_to",
        lhs: g.shape().to_vec(),
        rhs: shape.to_vec(),
    };
    let (gr, gc) = g.as_2d().ok_or_else(mismatch)?;
    let (tr, tc) = target.as_2d().ok_or_else(mismatch)?;
    if (tr != gr && tr != 1) || (tc != gc && tc != 1) {
        return Err(mismatch());
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..gr {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g.data()[i * gc + j];
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let zeros = Tensor::zeros(shape);
    let out = broadcast_binary("broadcast_to", &zeros, x, |_, v| v)?;
    if out.shape() != shape {
        return Err(SpeftError::ShapeMismatch {
            op: "broadcast_to",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(out)
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    width: usize,
    shape: AttentionShape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionShape {
        batch,
        seq,
        heads,
        causal,
    } = shape;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let visible = if causal { i + 1 } else { seq };
                let p = &probs[pbase + i * seq..pbase + i * seq + visible];
                let gi = &g[(b * seq + i) * width + h * dh..][..dh];
                for j in 0..visible {
                    let vj = &v[(b * seq + j) * width + h * dh..][..dh];
                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    let dvj = &mut dv[(b * seq + j) * width + h * dh..][..dh];
                    for (d, gv) in dvj.iter_mut().zip(gi) {
                        *d += p[j] * gv;
                    }
                }
                let dot: f64 = p.iter().zip(&dp[..visible]).map(|(a, b)| a * b).sum();
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let qrow = (b * seq + i) * width + h * dh;
                    let krow = (b * seq + j) * width + h * dh;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
