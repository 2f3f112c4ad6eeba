//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the list in reverse and accumulates vector-Jacobian products. Nodes are
//! appended in evaluation order, so inputs always precede their consumers.

use std::fmt;

use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside this module.
pub trait CustomBackward: Send + Sync {
    fn name(&self) -> &'static str;
    /// Given the upstream gradient of the output, returns one gradient per
    /// input, each shaped like that input.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Relu,
    Softplus,
    Sigmoid,
    /// Square root whose derivative at zero is taken as zero.
    Sqrt,
    Square,
    Abs,
    /// Heaviside step `x > 0`; zero derivative.
    Step,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Abs => "abs",
            Unary::Step => "step",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// d(out)/d(in) given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Step => 0.0,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    SqDist(Var, Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Custom(Vec<Var>, Box<dyn CustomBackward>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `v`, `None` if `v` does
    /// not influence the loss. Intermediate nodes do not retain gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled when `v` is unused.
    pub fn wrt_or_zero(&self, tape: &Tape, v: Var) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).dims();
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sums a `rows x cols` gradient down to `shape` (the broadcast source).
fn reduce_to(g: &Tensor, target: (usize, usize)) -> Tensor {
    let (r, c) = g.dims();
    if (r, c) == target {
        return g.clone();
    }
    let (tr, tc) = target;
    let mut out = Tensor::zeros(tr, tc);
    for i in 0..r {
        for j in 0..c {
            let ti = if tr == 1 { 0 } else { i };
            let tj = if tc == 1 { 0 } else { j };
            let idx = ti * tc + tj;
            out.data_mut()[idx] += g.data()[i * c + j];
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Any leaf can receive a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.leaf(Tensor::scalar(value))
    }

    /// Copies the current value of `v` into a new leaf, cutting the gradient
    /// path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = ta.dims();
        let (rb, cb) = tb.dims();
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (r, c) = match (broadcast_dim(ra, rb), broadcast_dim(ca, cb)) {
            (Some(r), Some(c)) => (r, c),
            _ => return Err(shape_err(name, ta, tb)),
        };
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if ra == 1 { 0 } else { i };
            let ib = if rb == 1 { 0 } else { i };
            for j in 0..c {
                let x = da[ia * ca + if ca == 1 { 0 } else { j }];
                let y = db[ib * cb + if cb == 1 { 0 } else { j }];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        self.push(value, Op::Binary(kind, a, b), name)
    }

    /// Elementwise sum with row/column broadcasting of size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let value = self.value(a).as_matrix().map(|x| kind.apply(x));
        self.push(value, Op::Unary(kind, a), kind.name())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Cos, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).as_matrix().map(|x| c * x);
        self.push(value, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).as_matrix().map(|x| x + c);
        self.push(value, Op::AddScalar(a), "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims();
        let (k2, m) = tb.dims();
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let value = Tensor::matrix(n, m, matmul_raw(ta.data(), tb.data(), n, k, m))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(vec![rows, cols])?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    /// Sum of all entries, `1x1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        self.push(Tensor::matrix(1, c, out)?, Op::SumRows(a), "sum_rows")
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let r = t.rows();
        let out: Vec<f64> = (0..r).map(|i| t.row(i).iter().sum()).collect();
        self.push(Tensor::matrix(r, 1, out)?, Op::SumCols(a), "sum_cols")
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (`n x p`)
    /// and the rows of `b` (`m x p`).
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        use rayon::prelude::*;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, p) = ta.dims();
        let (m, p2) = tb.dims();
        if p != p2 {
            return Err(shape_err("sq_dist", ta, tb));
        }
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; n * m];
        let fill = |(i, row): (usize, &mut [f64])| {
            let ai = &da[i * p..(i + 1) * p];
            for (j, o) in row.iter_mut().enumerate() {
                let bj = &db[j * p..(j + 1) * p];
                *o = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        };
        if n * m * p >= 1 << 16 {
            out.par_chunks_mut(m).enumerate().for_each(fill);
        } else {
            out.chunks_mut(m).enumerate().for_each(fill);
        }
        self.push(Tensor::matrix(n, m, out)?, Op::SqDist(a, b), "sq_dist")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_rows(self.value(b))?;
        self.push(value, Op::ConcatRows(a, b), "concat_rows")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let value = Tensor::from_fn(r, ca + cb, |i, j| {
            if j < ca {
                ta.get(i, j)
            } else {
                tb.get(i, j - ca)
            }
        });
        self.push(value, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.rows() {
            return Err(crate::error::invalid(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                t.rows()
            )));
        }
        let c = t.cols();
        let value = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        self.push(value, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.cols() {
            return Err(crate::error::invalid(format!(
                "slice_cols {start}..{} of {} cols",
                start + len,
                t.cols()
            )));
        }
        let value = Tensor::from_fn(t.rows(), len, |i, j| t.get(i, start + j));
        self.push(value, Op::SliceCols(a, start), "slice_cols")
    }

    /// Records an externally computed node with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        let name = rule.name();
        self.push(value.as_matrix(), Op::Custom(inputs.to_vec(), rule), name)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Binary(kind, a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (ra, ca) = ta.dims();
                    let (rb, cb) = tb.dims();
                    let (r, c) = g.dims();
                    let mut ga = Tensor::zeros(r, c);
                    let mut gb = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let x = ta.data()[(if ra == 1 { 0 } else { i }) * ca
                                + if ca == 1 { 0 } else { j }];
                            let y = tb.data()[(if rb == 1 { 0 } else { i }) * cb
                                + if cb == 1 { 0 } else { j }];
                            let gij = g.data()[i * c + j];
                            let (da, db) = match kind {
                                Binary::Add => (gij, gij),
                                Binary::Sub => (gij, -gij),
                                Binary::Mul => (gij * y, gij * x),
                                Binary::Div => (gij / y, -gij * x / (y * y)),
                            };
                            ga.data_mut()[i * c + j] = da;
                            gb.data_mut()[i * c + j] = db;
                        }
                    }
                    acc(&mut grads, *a, reduce_to(&ga, (ra, ca)));
                    acc(&mut grads, *b, reduce_to(&gb, (rb, cb)));
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(out.data())
                        .map(|((gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                        .collect();
                    acc(&mut grads, *a, Tensor::matrix(x.rows(), x.cols(), data)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(&tb.transpose())?;
                    let gb = ta.transpose().matmul(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).dims();
                    acc(&mut grads, *a, Tensor::matrix(r, c, g.into_data())?);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).dims();
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.value(*a).dims();
                    acc(&mut grads, *a, Tensor::from_fn(r, c, |_, j| g.data()[j]));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.value(*a).dims();
                    acc(&mut grads, *a, Tensor::from_fn(r, c, |i, _| g.data()[i]));
                }
                Op::SqDist(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, p) = ta.dims();
                    let m = tb.rows();
                    let gb_prod = g.matmul(tb)?; // n x p
                    let ga_prod = g.transpose().matmul(ta)?; // m x p
                    let row_sum: Vec<f64> = (0..n).map(|i| g.row(i).iter().sum()).collect();
                    let mut col_sum = vec![0.0; m];
                    for i in 0..n {
                        for (cs, v) in col_sum.iter_mut().zip(g.row(i)) {
                            *cs += v;
                        }
                    }
                    let ga = Tensor::from_fn(n, p, |i, k| {
                        2.0 * (row_sum[i] * ta.get(i, k) - gb_prod.get(i, k))
                    });
                    let gb = Tensor::from_fn(m, p, |j, k| {
                        2.0 * (col_sum[j] * tb.get(j, k) - ga_prod.get(j, k))
                    });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::ConcatRows(a, b) => {
                    let (ra, c) = self.value(*a).dims();
                    let rb = self.value(*b).rows();
                    let d = g.data();
                    acc(&mut grads, *a, Tensor::matrix(ra, c, d[..ra * c].to_vec())?);
                    acc(&mut grads, *b, Tensor::matrix(rb, c, d[ra * c..].to_vec())?);
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = self.value(*a).dims();
                    let cb = self.value(*b).cols();
                    acc(&mut grads, *a, Tensor::from_fn(r, ca, |i, j| g.get(i, j)));
                    acc(&mut grads, *b, Tensor::from_fn(r, cb, |i, j| g.get(i, ca + j)));
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).dims();
                    let mut ga = Tensor::zeros(r, c);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).dims();
                    let len = g.cols();
                    let ga = Tensor::from_fn(r, c, |i, j| {
                        if j >= *start && j < start + len {
                            g.get(i, j - start)
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Custom(inputs, rule) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = rule.backward(&g, &vals)?;
                    for (v, gi) in inputs.iter().zip(gs) {
                        acc(&mut grads, *v, gi);
                    }
                }
            }
        }
        // The loss slot was consumed by the loop; restore it for callers that
        // ask for d(loss)/d(loss).
        grads[loss.0] = Some(Tensor::scalar(1.0));
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, rows: usize, cols: usize, data: &[f64]) -> Var {
        t.leaf(Tensor::matrix(rows, cols, data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 2, 2, &[1.0, -2.0, 3.5, 0.0]);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_input() {
        let mut t = Tape::new();
        let data = [0.5, -1.5, 2.0];
        let x = leaf(&mut t, 3, 1, &data);
        let sq = t.square(x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.wrt(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 2, 1, &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_reported() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 1, &[0.0]);
        assert!(matches!(t.ln(x), Err(Error::NonFinite("log"))));
    }

    #[test]
    fn broadcasting_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let row = leaf(&mut t, 1, 3, &[10.0, 20.0, 30.0]);
        let col = leaf(&mut t, 2, 1, &[1.0, 2.0]);
        let s = t.add(a, row).unwrap();
        let s = t.mul(s, col).unwrap();
        assert_eq!(t.value(s).data(), &[11.0, 22.0, 33.0, 28.0, 50.0, 72.0]);
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(row).unwrap().data(), &[3.0, 3.0, 3.0]);
        assert_eq!(g.wrt(col).unwrap().data(), &[66.0, 75.0]);
        let bad = leaf(&mut t, 3, 1, &[1.0, 2.0, 3.0]);
        assert!(t.add(a, bad).is_err());
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 1, &[1.0]);
        let y = leaf(&mut t, 1, 1, &[2.0]);
        let l = t.square(x).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.wrt(y).is_none());
        assert_eq!(g.wrt_or_zero(&t, y).data(), &[0.0]);
    }

    #[test]
    fn sqrt_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 2, &[0.0, 4.0]);
        let r = t.sqrt(x).unwrap();
        let l = t.sum(r).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.25]);
    }
}
