//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation is a method on [`Tape`]. Operands and results are [`Var`]
//! handles into the tape's node arena, so the arena order is a valid
//! topological order by construction. [`Tape::backward`] walks the arena in
//! reverse exactly once and stores `∂loss/∂node` on every reachable node that
//! requires a gradient.
//!
//! Gradient contract: gradients are written, never accumulated, across
//! backward calls. A tape supports a single backward pass; a second call is
//! rejected with [`Error::BackwardAlreadyRun`]. Build a fresh tape per step.
//!
//! ```
//! use bifp_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![3.0]), true).unwrap();
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.mean(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[6.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Dense row-major tensor. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(Error::InvalidTensor {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Vec<f64>),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    LogisticLoss(usize, Vec<f64>),
    Mean(usize),
    Sum(usize),
    DotConst(usize, Vec<f64>),
    Concat(Vec<usize>),
    Reshape(usize),
    StraightThrough(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only record of operations.
///
/// A tape is `Send` but not shared: one thread builds and differentiates it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.idx].value
    }

    /// Gradient stored by the last backward pass, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.id {
            return None;
        }
        self.nodes.get(v.idx).and_then(|n| n.grad.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.idx].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        // Nothing downstream of a constant needs the op recorded for backward.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(&[ia, ib]);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(ia, ib), rg, "matmul")
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`; the layout of a dense layer with `[out×in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &tb.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(ar, br);
            }
        }
        let rg = self.rg(&[ia, ib]);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulNt(ia, ib), rg, "matmul_nt")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        if ta.shape != tb.shape {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor { shape: ta.shape.clone(), data }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[ia, ib]);
        self.push(t, Op::Add(ia, ib), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[ia, ib]);
        self.push(t, Op::Sub(ia, ib), rg, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[ia, ib]);
        self.push(t, Op::Mul(ia, ib), rg, "mul")
    }

    /// Adds a length-`n` row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(row)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        if ta.shape.len() != 2 || tb.shape != [ta.shape[1]] {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = ta.shape[1];
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data[i % n])
            .collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(&[ia, ib]);
        self.push(t, Op::AddRow(ia, ib), rg, "add_row")
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let ia = self.index(a)?;
        let ta = &self.node(ia).value;
        if ta.data.len() != c.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: ta.shape.clone(),
                right: vec![c.len()],
            });
        }
        let data = ta.data.iter().zip(c).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(&[ia]);
        self.push(t, Op::MulConst(ia, c.to_vec()), rg, "mul_const")
    }

    fn map_unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.index(a)?;
        let ta = &self.node(ia).value;
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[ia]);
        self.push(t, op(ia), rg, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_unary(a, "scale", |x| c * x, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_unary(a, "add_scalar", |x| x + c, Op::AddScalar)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, "relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, "sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, "square", |x| x * x, Op::Square)
    }

    /// Same values, new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let ta = &self.node(ia).value;
        let t = Tensor::new(shape.to_vec(), ta.data.clone()).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            left: ta.shape.clone(),
            right: shape.to_vec(),
        })?;
        let rg = self.rg(&[ia]);
        self.push(t, Op::Reshape(ia), rg, "reshape")
    }

    /// Mean logistic loss `(1/n) Σ log(1 + exp(−yᵢ zᵢ))` for targets in {−1, +1}.
    pub fn logistic_loss(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let ia = self.index(logits)?;
        let ta = &self.node(ia).value;
        if ta.data.len() != targets.len() || targets.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "logistic_loss",
                left: ta.shape.clone(),
                right: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let total: f64 = ta.data.iter().zip(targets).map(|(&z, &y)| softplus(-y * z)).sum();
        let rg = self.rg(&[ia]);
        self.push(Tensor::scalar(total / n), Op::LogisticLoss(ia, targets.to_vec()), rg, "logistic_loss")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let ta = &self.node(ia).value;
        let m = ta.data.iter().sum::<f64>() / ta.data.len() as f64;
        let rg = self.rg(&[ia]);
        self.push(Tensor::scalar(m), Op::Mean(ia), rg, "mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let s = self.node(ia).value.data.iter().sum::<f64>();
        let rg = self.rg(&[ia]);
        self.push(Tensor::scalar(s), Op::Sum(ia), rg, "sum")
    }

    /// `Σ aᵢ wᵢ` against a constant weight vector.
    pub fn dot_const(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        let ia = self.index(a)?;
        let ta = &self.node(ia).value;
        if ta.data.len() != w.len() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                left: ta.shape.clone(),
                right: vec![w.len()],
            });
        }
        let s = dot(&ta.data, w);
        let rg = self.rg(&[ia]);
        self.push(Tensor::scalar(s), Op::DotConst(ia, w.to_vec()), rg, "dot_const")
    }

    /// Flattens and concatenates operands into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::new();
        for &i in &idx {
            data.extend_from_slice(&self.node(i).value.data);
        }
        if data.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: vec![],
                right: vec![],
            });
        }
        let rg = self.rg(&idx);
        self.push(Tensor::vector(data), Op::Concat(idx), rg, "concat")
    }

    /// Forward value is `hard`; backward passes the incoming gradient to
    /// `scores` unchanged (straight-through estimator).
    pub fn straight_through(&mut self, scores: Var, hard: &Tensor) -> Result<Var> {
        let ia = self.index(scores)?;
        let ta = &self.node(ia).value;
        if ta.shape != hard.shape {
            return Err(shape_err("straight_through", ta, hard));
        }
        let rg = self.rg(&[ia]);
        self.push(hard.clone(), Op::StraightThrough(ia), rg, "straight_through")
    }

    /// Reverse pass from a scalar `loss`, populating gradients of every
    /// reachable node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        self.backward_done = true;
        if !self.nodes[li].requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |j: usize, contrib: Vec<f64>| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if nodes[*a].requires_grad {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            let gr = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                da[r * k + c] = dot(gr, &tb.data[c * n..(c + 1) * n]);
                            }
                        }
                        send(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        for r in 0..m {
                            for c in 0..k {
                                let av = ta.data[r * k + c];
                                if av == 0.0 {
                                    continue;
                                }
                                let row = &mut db[c * n..(c + 1) * n];
                                axpy(row, av, &g[r * n..(r + 1) * n]);
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                    if nodes[*a].requires_grad {
                        // dA = dC · B
                        send(*a, matmul_raw(&g, &tb.data, m, n, k));
                    }
                    if nodes[*b].requires_grad {
                        // dB = dCᵀ · A
                        let mut db = vec![0.0; n * k];
                        for r in 0..m {
                            let ar = &ta.data[r * k..(r + 1) * k];
                            for j in 0..n {
                                let gv = g[r * n + j];
                                if gv != 0.0 {
                                    axpy(&mut db[j * k..(j + 1) * k], gv, ar);
                                }
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    send(*a, g.iter().zip(&tb.data).map(|(x, y)| x * y).collect());
                    send(*b, g.iter().zip(&ta.data).map(|(x, y)| x * y).collect());
                }
                Op::AddRow(a, b) => {
                    let n = nodes[*b].value.data.len();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                    send(*a, g.clone());
                    send(*b, db);
                }
                Op::MulConst(a, c) => send(*a, g.iter().zip(c).map(|(x, y)| x * y).collect()),
                Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
                Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => send(*a, g.clone()),
                Op::Relu(a) => {
                    let ta = &nodes[*a].value;
                    send(*a, g.iter().zip(&ta.data).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect());
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    send(*a, g.iter().zip(&out.data).map(|(x, y)| x * y * (1.0 - y)).collect());
                }
                Op::Square(a) => {
                    let ta = &nodes[*a].value;
                    send(*a, g.iter().zip(&ta.data).map(|(x, v)| 2.0 * v * x).collect());
                }
                Op::LogisticLoss(a, y) => {
                    let ta = &nodes[*a].value;
                    let scale = g[0] / y.len() as f64;
                    send(*a, ta.data.iter().zip(y).map(|(&z, &t)| -t * sigmoid(-t * z) * scale).collect());
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.data.len();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.data.len();
                    send(*a, vec![g[0]; n]);
                }
                Op::DotConst(a, w) => send(*a, w.iter().map(|x| x * g[0]).collect()),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.data.len();
                        send(p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
            }
            let shape = self.nodes[i].value.shape.clone();
            self.nodes[i].grad = Some(Tensor { shape, data: g });
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
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

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(row, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
}
