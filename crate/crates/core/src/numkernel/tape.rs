//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a `1 × 1` node walks the record in reverse and
//! accumulates the adjoint of every node, including parameters.
//!
//! ```
//! use fedexdnn::numkernel::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::row_vector(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.scale(sq, 0.5);
//! let loss = tape.sum(half);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).values(), &[1.0, -2.0, 3.0]);
//! ```

use super::{KernelError, Tensor, LOG_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of an element-wise op is broadcast over the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Self, KernelError> {
        let (m, n) = lhs.dims();
        match rhs.dims() {
            (r, c) if r == m && c == n => Ok(Broadcast::Same),
            (1, 1) => Ok(Broadcast::Scalar),
            (1, c) if c == n => Ok(Broadcast::Row),
            (r, 1) if r == m => Ok(Broadcast::Col),
            _ => Err(KernelError::ShapeMismatch {
                op,
                left: lhs.shape().to_vec(),
                right: rhs.shape().to_vec(),
            }),
        }
    }

    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => r * cols + c,
            Broadcast::Row => c,
            Broadcast::Col => r,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Elementwise(Binary, Broadcast, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    NormalizeRows(Var, Vec<f64>),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; exactly zero when `var` did not
    /// participate.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.adjoints[var.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.adjoints[var.0].take() {
            Some(t) => t,
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = true;
        v
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn is_param(&self, var: Var) -> bool {
        self.nodes[var.0].param
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.values()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, KernelError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let lhs = self.value(a);
        let rhs = self.value(b);
        let bc = Broadcast::resolve(name, lhs, rhs)?;
        let (m, n) = lhs.dims();
        let (lv, rv) = (lhs.values(), rhs.values());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                let x = lv[r * n + c];
                let y = rv[bc.index(r, c, n)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let value = Tensor::new(lhs.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Elementwise(kind, bc, a, b)))
    }

    /// `a + b`; `b` may be a row, column or scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Natural log with the argument floored at [`LOG_EPS`]; the floored
    /// region has zero gradient.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(LOG_EPS).ln());
        self.push(value, Op::Ln(a))
    }

    /// Stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column-wise sum: `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (_, n) = t.dims();
        let mut out = vec![0.0; n];
        for row in t.row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::row_vector(out), Op::SumRows(a))
    }

    /// Row-wise sum: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.rows();
        let out: Vec<f64> = t.row_iter().map(|r| r.iter().sum()).collect();
        let value = Tensor::matrix(m, 1, out).expect("row sums have m entries");
        self.push(value, Op::SumCols(a))
    }

    /// Scales each row to unit L2 norm. Fails on a row with norm below
    /// [`LOG_EPS`].
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, KernelError> {
        let t = self.value(a);
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for (i, row) in t.row_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm < LOG_EPS {
                return Err(KernelError::Degenerate {
                    op: "normalize_rows",
                    detail: format!("row {i} has norm {norm:e}"),
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::NormalizeRows(a, norms)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.len());
        for row in t.row_iter() {
            out.extend(super::softmax_scaled(row, 1.0));
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(KernelError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(m, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, KernelError> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(KernelError::ShapeMismatch {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for row in t.row_iter() {
            out.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::matrix(t.rows(), end - start, out)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Propagates adjoints from the scalar node `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, KernelError> {
        if self.value(loss).len() != 1 {
            return Err(KernelError::ShapeMismatch {
                op: "backward",
                left: self.value(loss).shape().to_vec(),
                right: vec![1, 1],
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // leaves keep their adjoint for the caller
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul(&bv.transpose())?;
                    let gb = av.transpose().matmul(&g)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Elementwise(kind, bc, a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, n) = av.dims();
                    let mut ga = vec![0.0; m * n];
                    let mut gb = vec![0.0; bv.len()];
                    let (lv, rv, gv) = (av.values(), bv.values(), g.values());
                    for r in 0..m {
                        for c in 0..n {
                            let i = r * n + c;
                            let j = bc.index(r, c, n);
                            let (x, y, gi) = (lv[i], rv[j], gv[i]);
                            match kind {
                                Binary::Add => {
                                    ga[i] = gi;
                                    gb[j] += gi;
                                }
                                Binary::Sub => {
                                    ga[i] = gi;
                                    gb[j] -= gi;
                                }
                                Binary::Mul => {
                                    ga[i] = gi * y;
                                    gb[j] += gi * x;
                                }
                                Binary::Div => {
                                    ga[i] = gi / y;
                                    gb[j] -= gi * x / (y * y);
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    accumulate(&mut adj, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::Scale(a, k) => accumulate(&mut adj, *a, g.map(|v| v * k)),
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &node.value, |gi, y| gi * y * (1.0 - y));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_map(&g, self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip_map(&g, &node.value, |gi, y| gi * y);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = zip_map(&g, self.value(*a), |gi, x| {
                        if x > LOG_EPS {
                            gi / x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = zip_map(&g, self.value(*a), |gi, x| gi * sigmoid(x));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (m, n) = self.value(*a).dims();
                    let shape = self.value(*a).shape().to_vec();
                    let ga = Tensor::new(shape, vec![g.values()[0]; m * n])?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::SumRows(a) => {
                    let t = self.value(*a);
                    let mut out = Vec::with_capacity(t.len());
                    for _ in 0..t.rows() {
                        out.extend_from_slice(g.values());
                    }
                    accumulate(&mut adj, *a, Tensor::new(t.shape().to_vec(), out)?);
                }
                Op::SumCols(a) => {
                    let t = self.value(*a);
                    let n = t.cols();
                    let mut out = Vec::with_capacity(t.len());
                    for &gi in g.values() {
                        out.extend(std::iter::repeat_n(gi, n));
                    }
                    accumulate(&mut adj, *a, Tensor::new(t.shape().to_vec(), out)?);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut out = Vec::with_capacity(y.len());
                    for ((yr, gr), norm) in y.row_iter().zip(g.row_iter()).zip(norms) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(yi, gi)| (gi - yi * dot) / norm));
                    }
                    accumulate(&mut adj, *a, Tensor::new(y.shape().to_vec(), out)?);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = Vec::with_capacity(y.len());
                    for (yr, gr) in y.row_iter().zip(g.row_iter()) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                    }
                    accumulate(&mut adj, *a, Tensor::new(y.shape().to_vec(), out)?);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let w = t.cols();
                        let mut out = Vec::with_capacity(t.len());
                        for r in 0..t.rows() {
                            out.extend_from_slice(&g.values()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut adj, p, Tensor::new(t.shape().to_vec(), out)?);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let t = self.value(*a);
                    let n = t.cols();
                    let w = g.cols();
                    let mut out = vec![0.0; t.len()];
                    for (r, gr) in g.row_iter().enumerate() {
                        out[r * n + start..r * n + start + w].copy_from_slice(gr);
                    }
                    accumulate(&mut adj, *a, Tensor::new(t.shape().to_vec(), out)?);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.dims()).collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = g
        .values()
        .iter()
        .zip(other.values())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(other.shape().to_vec(), values).expect("same shape")
}

fn accumulate(adj: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
