//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value. Node indices are
//! a topological order by construction, so the backward pass is a single sweep
//! from the loss node down to index 0.

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn};
use crate::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// `backward` receives the forward inputs, the forward output and the adjoint
/// of the output, and returns one adjoint per input (`None` for inputs that
/// need no gradient).
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Neg,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Softplus,
    LeakyRelu(f64),
    Relu,
    SoftmaxRows,
    LayerNorm,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Row(usize),
    Scalar,
}

impl Bcast {
    #[inline]
    fn map(self, idx: usize) -> usize {
        match self {
            Bcast::Same => idx,
            Bcast::Row(n) => idx % n,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Neg,
    Exp,
    Log,
    Square,
    Sqrt,
    Recip,
    Softplus,
    Relu,
    LeakyRelu(f64),
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Binary(BinOp, Var, Var, Bcast, Bcast),
    Unary(UnOp, Var),
    Sum(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxMasked(Var, Vec<bool>),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_opt(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape(format!("{what}: {a:?} vs {b:?}"))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; n * m];
        matmul_nt(av.data(), bv.data(), &mut out, n, k, m);
        let value = Tensor::matrix(n, m, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(TensorError::Shape(format!("transpose of {:?}", av.shape())));
        }
        let value = av.transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast, Bcast), TensorError> {
        let numel = |s: &[usize]| s.iter().product::<usize>();
        if a == b {
            return Ok((a.to_vec(), Bcast::Same, Bcast::Same));
        }
        if numel(b) == 1 {
            return Ok((a.to_vec(), Bcast::Same, Bcast::Scalar));
        }
        if numel(a) == 1 {
            return Ok((b.to_vec(), Bcast::Scalar, Bcast::Same));
        }
        let row_of = |small: &[usize], big: &[usize]| {
            small.len() == big.len() && !small.is_empty() && small[0] == 1 && small[1..] == big[1..]
        };
        if row_of(b, a) {
            return Ok((a.to_vec(), Bcast::Same, Bcast::Row(numel(b))));
        }
        if row_of(a, b) {
            return Ok((b.to_vec(), Bcast::Row(numel(a)), Bcast::Same));
        }
        Err(shape_err("broadcast", a, b))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (shape, ba, bb) = Self::broadcast(av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let data = (0..n)
            .map(|i| {
                let (x, y) = (ad[ba.map(i)], bd[bb.map(i)]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b, ba, bb), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Mul, a, b)
    }

    /// Division by zero yields infinities; callers reject them via finiteness checks.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinOp::Div, a, b)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if let UnOp::Log = op {
            if av.data().iter().any(|&v| v <= 0.0 || v.is_nan()) {
                return Err(TensorError::Domain("log of non-positive value".into()));
            }
        }
        if let UnOp::Sqrt = op {
            if av.data().iter().any(|&v| v < 0.0 || v.is_nan()) {
                return Err(TensorError::Domain("sqrt of negative value".into()));
            }
        }
        let value = av.map(|x| match op {
            UnOp::Neg => -x,
            UnOp::Exp => x.exp(),
            UnOp::Log => x.ln(),
            UnOp::Square => x * x,
            UnOp::Sqrt => x.sqrt(),
            UnOp::Recip => 1.0 / x,
            UnOp::Softplus => softplus(x),
            UnOp::Relu => x.max(0.0),
            UnOp::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            UnOp::Scale(c) => c * x,
            UnOp::AddScalar(c) => x + c,
            UnOp::ClampMin(c) => x.max(c),
        });
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnOp::Sqrt, a)
    }

    /// Elementwise inverse.
    pub fn recip(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnOp::Recip, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnOp::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnOp::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        self.unary(UnOp::LeakyRelu(slope), a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnOp::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnOp::AddScalar(c), a)
    }

    /// `max(a, c)`; the gradient is passed only where `a > c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnOp::ClampMin(c), a)
    }

    /// Dispatch over the elementwise operator family.
    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let need = |b: Option<Var>| b.ok_or_else(|| TensorError::Contract(format!("{op:?} needs two operands")));
        match op {
            ElemOp::Add => self.add(a, need(b)?),
            ElemOp::Sub => self.sub(a, need(b)?),
            ElemOp::Mul => self.mul(a, need(b)?),
            ElemOp::Div => self.div(a, need(b)?),
            ElemOp::Exp => self.exp(a),
            ElemOp::Log => self.log(a),
            ElemOp::Neg => self.neg(a),
            ElemOp::Square => self.square(a),
        }
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var, TensorError> {
        match kind {
            Activation::Softplus => self.softplus(a),
            Activation::LeakyRelu(s) => self.leaky_relu(a, s),
            Activation::Relu => self.relu(a),
            Activation::SoftmaxRows => self.softmax_rows(a),
            Activation::LayerNorm => self.layer_norm_rows(a),
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means of a matrix, as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if !av.is_matrix() || av.rows() == 0 {
            return Err(TensorError::Shape(format!("mean_rows of {:?}", av.shape())));
        }
        let (n, m) = (av.rows(), av.cols());
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(av.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(TensorError::Shape(format!("softmax_rows of {:?}", av.shape())));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise log-softmax restricted to entries where `mask` is true.
    ///
    /// Masked-out entries are 0 in the output and receive no gradient. A row
    /// with no active entries is all zeros.
    pub fn log_softmax_rows_masked(&mut self, a: Var, mask: Vec<bool>) -> Result<Var, TensorError> {
        let av = self.value(a);
        if !av.is_matrix() || mask.len() != av.len() {
            return Err(TensorError::Shape(format!(
                "masked log-softmax of {:?} with mask of {}",
                av.shape(),
                mask.len()
            )));
        }
        let (n, m) = (av.rows(), av.cols());
        let mut value = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let row = av.row_slice(i);
            let active = &mask[i * m..(i + 1) * m];
            let max = row
                .iter()
                .zip(active)
                .filter(|(_, &on)| on)
                .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let total = row
                .iter()
                .zip(active)
                .filter(|(_, &on)| on)
                .fold(0.0, |acc, (&v, _)| acc + (v - max).exp());
            let lse = max + total.ln();
            let out = value.row_slice_mut(i);
            for j in 0..m {
                if active[j] {
                    out[j] = row[j] - lse;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmaxMasked(a, mask), rg))
    }

    /// Per-row standardisation to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(TensorError::Shape(format!("layer_norm of {:?}", av.shape())));
        }
        let (n, m) = (av.rows(), av.cols());
        let mut value = av.clone();
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = value.row_slice_mut(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LayerNorm(a, inv_std), rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        if tensors.iter().any(|t| !t.is_matrix()) {
            return Err(TensorError::Shape("concat_cols needs matrices".into()));
        }
        let value = Tensor::hstack(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Records an externally computed forward value with its own vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each call starts from fresh adjoints, so repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if want(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_nt(g.data(), bv.data(), &mut ga, n, m, k);
                    accumulate(grads, *a, av.shape(), &ga);
                }
                if want(*b) {
                    let mut gb = vec![0.0; k * m];
                    matmul_tn(av.data(), g.data(), &mut gb, n, k, m);
                    accumulate(grads, *b, bv.shape(), &gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if want(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_nn(g.data(), bv.data(), &mut ga, n, m, k);
                    accumulate(grads, *a, av.shape(), &ga);
                }
                if want(*b) {
                    let mut gb = vec![0.0; m * k];
                    matmul_tn(g.data(), av.data(), &mut gb, n, m, k);
                    accumulate(grads, *b, bv.shape(), &gb);
                }
            }
            Op::Transpose(a) => {
                if want(*a) {
                    accumulate(grads, *a, val(*a).shape(), g.transpose().data());
                }
            }
            Op::Binary(op, a, b, ba, bb) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let gd = g.data();
                if want(*a) {
                    let mut ga = vec![0.0; ad.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let d = match op {
                            BinOp::Add | BinOp::Sub => 1.0,
                            BinOp::Mul => bd[bb.map(i)],
                            BinOp::Div => 1.0 / bd[bb.map(i)],
                        };
                        ga[ba.map(i)] += gi * d;
                    }
                    accumulate(grads, *a, val(*a).shape(), &ga);
                }
                if want(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let y = bd[bb.map(i)];
                        let d = match op {
                            BinOp::Add => 1.0,
                            BinOp::Sub => -1.0,
                            BinOp::Mul => ad[ba.map(i)],
                            BinOp::Div => -ad[ba.map(i)] / (y * y),
                        };
                        gb[bb.map(i)] += gi * d;
                    }
                    accumulate(grads, *b, val(*b).shape(), &gb);
                }
            }
            Op::Unary(op, a) => {
                if !want(*a) {
                    return;
                }
                let x = val(*a).data();
                let y = node.value.data();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let d = match op {
                            UnOp::Neg => -1.0,
                            UnOp::Exp => y[i],
                            UnOp::Log => 1.0 / x[i],
                            UnOp::Square => 2.0 * x[i],
                            UnOp::Sqrt => 0.5 / y[i],
                            UnOp::Recip => -y[i] * y[i],
                            UnOp::Softplus => sigmoid(x[i]),
                            UnOp::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnOp::LeakyRelu(s) => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    *s
                                }
                            }
                            UnOp::Scale(c) => *c,
                            UnOp::AddScalar(_) => 1.0,
                            UnOp::ClampMin(c) => {
                                if x[i] > *c {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gi * d
                    })
                    .collect();
                accumulate(grads, *a, val(*a).shape(), &ga);
            }
            Op::Sum(a) => {
                if want(*a) {
                    let av = val(*a);
                    let ga = vec![g.item(); av.len()];
                    accumulate(grads, *a, av.shape(), &ga);
                }
            }
            Op::MeanRows(a) => {
                if want(*a) {
                    let av = val(*a);
                    let (n, m) = (av.rows(), av.cols());
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g.data()[j] / n as f64;
                        }
                    }
                    accumulate(grads, *a, av.shape(), &ga);
                }
            }
            Op::SoftmaxRows(a) => {
                if want(*a) {
                    let y = &node.value;
                    let (n, m) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            ga[i * m + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, y.shape(), &ga);
                }
            }
            Op::LogSoftmaxMasked(a, mask) => {
                if want(*a) {
                    let y = &node.value;
                    let (n, m) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        let active = &mask[i * m..(i + 1) * m];
                        let gr = g.row_slice(i);
                        let total: f64 = (0..m).filter(|&j| active[j]).map(|j| gr[j]).sum();
                        for j in 0..m {
                            if active[j] {
                                ga[i * m + j] = gr[j] - y.get(i, j).exp() * total;
                            }
                        }
                    }
                    accumulate(grads, *a, y.shape(), &ga);
                }
            }
            Op::LayerNorm(a, inv_std) => {
                if want(*a) {
                    let y = &node.value;
                    let (n, m) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let mean_g = gr.iter().sum::<f64>() / m as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            ga[i * m + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    accumulate(grads, *a, y.shape(), &ga);
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if want(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                        }
                        accumulate(grads, p, pv.shape(), &gp);
                    }
                    offset += w;
                }
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                debug_assert_eq!(outs.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, gi) in inputs.iter().zip(outs) {
                    if let (true, Some(gi)) = (want(v), gi) {
                        accumulate(grads, v, val(v).shape(), gi.data());
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape"));
        }
    }
}
