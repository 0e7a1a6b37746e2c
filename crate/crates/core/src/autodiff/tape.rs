use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Componentwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Identity,
        Activation::Tanh,
        Activation::Sigmoid,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
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

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Elementwise(Var, Activation),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GumbelSoftmax {
        logits: Var,
        soft: Vec<f64>,
        tau: f64,
    },
    Sum(Var),
    Mean(Var),
    Average(Vec<Var>),
    NarrowCols {
        input: Var,
        start: usize,
    },
    SelectRows {
        mask: Vec<bool>,
        on: Var,
        off: Var,
    },
    GroupDot {
        queries: Var,
        keys: Var,
        group: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Nodes are appended in execution order, so indices are already a
/// topological order. Leaf gradients persist across [`Tape::backward`]
/// calls and accumulate until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when it was never reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a single row `bias` (`1 × n` or `[n]`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::Dimension {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, b) in row.iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).scaled(k);
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, k), rg)
    }

    pub fn elementwise(&mut self, f: Activation, x: Var) -> Var {
        if f == Activation::Identity {
            return x;
        }
        let value = self.value(x).map(|v| f.apply(v));
        let rg = self.needs(&[x]);
        self.push(value, Op::Elementwise(x, f), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Sigmoid, x)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, logits: Var) -> Var {
        let t = self.value(logits);
        let k = t.cols();
        let mut data = t.data().to_vec();
        data.chunks_mut(k).for_each(softmax_in_place);
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[logits]);
        self.push(value, Op::Softmax(logits), rg)
    }

    /// Mean over rows of `-ln softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, k) = (t.rows(), t.cols());
        if targets.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= k) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                len: k,
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, (logit_row, &y)) in probs
            .chunks_mut(k)
            .zip(t.data().chunks(k).zip(targets))
        {
            let max = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logit_row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - logit_row[y];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Straight-through Gumbel-Softmax over the rows of `logits`.
    ///
    /// Draws fresh Gumbel(0,1) noise from `rng`; see
    /// [`Tape::gumbel_softmax_with_noise`] for the deterministic form.
    pub fn gumbel_softmax_st(&mut self, logits: Var, tau: f64, rng: &mut RandomStream) -> Result<Var> {
        let noise = gumbel_noise(self.value(logits).len(), rng);
        self.gumbel_softmax_with_noise(logits, &noise, tau, true)
    }

    /// Gumbel-Softmax with explicit noise.
    ///
    /// When `hard`, the forward value is the one-hot argmax of
    /// `logits + noise`; the backward pass always uses the Jacobian of
    /// `softmax((logits + noise) / tau)`. With `hard == false` the forward
    /// value is that soft sample itself.
    pub fn gumbel_softmax_with_noise(
        &mut self,
        logits: Var,
        noise: &[f64],
        tau: f64,
        hard: bool,
    ) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
        }
        let t = self.value(logits);
        if noise.len() != t.len() {
            return Err(Error::Dimension {
                op: "gumbel_softmax",
                left: t.shape().to_vec(),
                right: vec![noise.len()],
            });
        }
        let k = t.cols();
        let mut soft: Vec<f64> = t
            .data()
            .iter()
            .zip(noise)
            .map(|(&l, &g)| (l + g) / tau)
            .collect();
        let mut hard_out = vec![0.0; soft.len()];
        for (row, out) in soft.chunks_mut(k).zip(hard_out.chunks_mut(k)) {
            out[argmax(row)] = 1.0;
            softmax_in_place(row);
        }
        let forward = if hard { hard_out } else { soft.clone() };
        let value = Tensor::new(t.shape().to_vec(), forward)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(value, Op::GumbelSoftmax { logits, soft, tau }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.needs(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn average(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("average of zero tensors".into()))?;
        for &x in &xs[1..] {
            self.same_shape("average", first, x)?;
        }
        let inv = 1.0 / xs.len() as f64;
        let mut data = vec![0.0; self.value(first).len()];
        for &x in xs {
            for (d, v) in data.iter_mut().zip(self.value(x).data()) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let value = Tensor::new(self.value(first).shape().to_vec(), data)?;
        let rg = self.needs(xs);
        Ok(self.push(value, Op::Average(xs.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if len == 0 || start + len > c {
            return Err(Error::Index {
                what: "narrow_cols end",
                index: start + len,
                len: c,
            });
        }
        let data = t
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::matrix(r, len, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::NarrowCols { input: x, start }, rg))
    }

    /// Row `i` of the result comes from `on` where `mask[i]`, else `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        self.same_shape("select_rows", on, off)?;
        let (ton, toff) = (self.value(on), self.value(off));
        if mask.len() != ton.rows() {
            return Err(Error::Dimension {
                op: "select_rows",
                left: ton.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let c = ton.cols();
        let data = mask
            .iter()
            .enumerate()
            .flat_map(|(i, &m)| if m { ton.row(i) } else { toff.row(i) }.iter().copied())
            .collect::<Vec<_>>();
        let value = Tensor::new(ton.shape().to_vec(), data)?;
        debug_assert_eq!(value.cols(), c);
        let rg = self.needs(&[on, off]);
        Ok(self.push(
            value,
            Op::SelectRows {
                mask: mask.to_vec(),
                on,
                off,
            },
            rg,
        ))
    }

    /// Dot products of each query row with its own group of key rows.
    ///
    /// `queries` is `b × z`, `keys` is `(b·group) × z`; output is
    /// `b × group` with `out[r][j] = queries[r] · keys[r·group + j]`.
    pub fn group_dot(&mut self, queries: Var, keys: Var, group: usize) -> Result<Var> {
        let (tq, tk) = (self.value(queries), self.value(keys));
        let (b, z) = (tq.rows(), tq.cols());
        if group == 0 || tk.cols() != z || tk.rows() != b * group {
            return Err(Error::Dimension {
                op: "group_dot",
                left: tq.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(b * group);
        for r in 0..b {
            let q = tq.row(r);
            for j in 0..group {
                out.push(dot(q, tk.row(r * group + j)));
            }
        }
        let value = Tensor::matrix(b, group, out)?;
        let rg = self.needs(&[queries, keys]);
        Ok(self.push(value, Op::GroupDot { queries, keys, group }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are added into the leaf buffers, so two calls without
    /// [`Tape::zero_grad`] leave exactly twice the gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut leaves);
        }
        for (i, g) in leaves {
            match &mut self.leaf_grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => leaves.push((i, g)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, tb.data(), true, &mut da, false);
                    send(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, &g, false, &mut db, false);
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|x| -x).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                send(*bias, db);
                send(*x, g);
            }
            Op::Scale(x, k) => send(*x, g.iter().map(|v| v * k).collect()),
            Op::Elementwise(x, f) => {
                let (tx, ty) = (self.value(*x), &node.value);
                let dx = g
                    .iter()
                    .zip(tx.data().iter().zip(ty.data()))
                    .map(|(gv, (&xv, &yv))| gv * f.derivative(xv, yv))
                    .collect();
                send(*x, dx);
            }
            Op::Softmax(x) => {
                let k = node.value.cols();
                send(*x, softmax_backward(node.value.data(), &g, k, 1.0));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(k).zip(targets) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                send(*logits, d);
            }
            Op::GumbelSoftmax { logits, soft, tau } => {
                let k = node.value.cols();
                send(*logits, softmax_backward(soft, &g, k, 1.0 / tau));
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Average(xs) => {
                let inv = 1.0 / xs.len() as f64;
                for &x in xs {
                    send(x, g.iter().map(|v| v * inv).collect());
                }
            }
            Op::NarrowCols { input, start } => {
                let tin = self.value(*input);
                let (c, len) = (tin.cols(), node.value.cols());
                let mut d = vec![0.0; tin.len()];
                for (drow, grow) in d.chunks_mut(c).zip(g.chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                send(*input, d);
            }
            Op::SelectRows { mask, on, off } => {
                let c = node.value.cols();
                let mut d_on = vec![0.0; g.len()];
                let mut d_off = vec![0.0; g.len()];
                for (r, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut d_on } else { &mut d_off };
                    dst[r * c..(r + 1) * c].copy_from_slice(&g[r * c..(r + 1) * c]);
                }
                send(*on, d_on);
                send(*off, d_off);
            }
            Op::GroupDot {
                queries,
                keys,
                group,
            } => {
                let (tq, tk) = (self.value(*queries), self.value(*keys));
                let z = tq.cols();
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                for r in 0..tq.rows() {
                    for j in 0..*group {
                        let gv = g[r * group + j];
                        let kr = r * group + j;
                        for p in 0..z {
                            dq[r * z + p] += gv * tk.data()[kr * z + p];
                            dk[kr * z + p] += gv * tq.data()[r * z + p];
                        }
                    }
                }
                send(*queries, dq);
                send(*keys, dk);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn softmax_backward(y: &[f64], g: &[f64], k: usize, scale: f64) -> Vec<f64> {
    let mut d = vec![0.0; y.len()];
    for ((drow, yrow), grow) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
        let inner = dot(yrow, grow);
        for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
            *dv = scale * yv * (gv - inner);
        }
    }
    d
}

/// `-ln(-ln u)` with `u` clamped to `[1e-12, 1 - 1e-12]`.
pub fn gumbel_noise(n: usize, rng: &mut RandomStream) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect()
}
