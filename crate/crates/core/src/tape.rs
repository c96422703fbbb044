//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated. Calling
//! [`Tape::backward`] replays the recorded backward rules in reverse
//! order, which is a valid topological order because every node only
//! refers to nodes recorded before it.
//!
//! ```
//! use crocodile::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
//! let loss = tape.sum(w).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations accepted by [`Tape::pointwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Abs,
    Add,
    Sub,
    Mul,
    Div,
}

/// Reductions accepted by [`Tape::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// `N×d → 1×d` column means.
    MeanRows,
    /// Scalar `Σ|x|`.
    AbsSum,
    /// Scalar `Σx`.
    Sum,
    /// Scalar mean.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Abs,
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
    // `true` when `b` is a single row broadcast over the rows of `a`.
    Binary(Binary, Var, Var, bool),
    Unary(Unary, Var),
    Scale(Var, f64),
    Softmax { x: Var, axis: usize },
    Gather { x: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Stack(Vec<Var>),
    ExpandLast { x: Var, n: usize },
    SumAxis { x: Var, axis: usize },
    MeanRows(Var),
    AbsSum(Var),
    Sum(Var),
    Mean(Var),
    Bce { p: Var, y: Vec<f64>, eps: f64 },
    RowNorm { x: Var, eps: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Clamp applied to probabilities before taking logarithms in [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-12;

/// Records a forward computation for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad. Leaves the loss does not
    /// depend on get an all-zero tensor.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)` strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `x` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn expect_2d(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.value(x).shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.expect_2d("matmul", a)?;
        let (k2, d) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, d],
            });
        }
        let mut out = vec![0.0; n * d];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, d);
        let value = Tensor::new(vec![n, d], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn pointwise(&mut self, op: Pointwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || Error::InvalidArgument(format!("{op:?} needs two operands"));
        match op {
            Pointwise::Relu => self.unary(Unary::Relu, a),
            Pointwise::Sigmoid => self.unary(Unary::Sigmoid, a),
            Pointwise::Abs => self.unary(Unary::Abs, a),
            Pointwise::Add => self.binary(Binary::Add, a, b.ok_or_else(need_b)?),
            Pointwise::Sub => self.binary(Binary::Sub, a, b.ok_or_else(need_b)?),
            Pointwise::Mul => self.binary(Binary::Mul, a, b.ok_or_else(need_b)?),
            Pointwise::Div => self.binary(Binary::Div, a, b.ok_or_else(need_b)?),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

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

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data: Vec<f64> = match kind {
            Unary::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Unary::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            Unary::Abs => x.data().iter().map(|v| v.abs()).collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Abs => "abs",
        };
        self.push(name, value, Op::Unary(kind, a), &[a])
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let row_broadcast = if av.shape() == bv.shape() {
            false
        } else if av.ndim() == 2
            && bv.numel() == av.shape()[1]
            && (bv.shape() == [1, av.shape()[1]] || bv.shape() == [av.shape()[1]])
        {
            true
        } else {
            return Err(Error::ShapeMismatch {
                op: "pointwise",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = if row_broadcast {
            let c = bv.numel();
            av.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % c]))
                .collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("pointwise", value, Op::Binary(kind, a, b, row_broadcast), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for shape {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(src[base + l * inner]);
                }
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    total += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Selects leading-axis rows; the backward pass scatter-adds, so repeated
    /// ids accumulate.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 {
            return Err(Error::InvalidArgument("gather_rows on a scalar".into()));
        }
        let rows = xv.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let value = xv.select_rows(ids);
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.expect_2d("transpose", x)?;
        let value = self.value(x).transpose2();
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Stacks `K` tensors of shape `N×d` into `N×K×d`.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyInput("stack"))?;
        let (n, d) = self.expect_2d("stack", first)?;
        for &x in xs {
            if self.value(x).shape() != [n, d] {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: vec![n, d],
                    rhs: self.value(x).shape().to_vec(),
                });
            }
        }
        let k = xs.len();
        let mut out = vec![0.0; n * k * d];
        for (j, &x) in xs.iter().enumerate() {
            let src = self.value(x).data();
            for i in 0..n {
                out[(i * k + j) * d..(i * k + j + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let value = Tensor::new(vec![n, k, d], out)?;
        self.push("stack", value, Op::Stack(xs.to_vec()), xs)
    }

    /// Appends an axis of length `n`, repeating every value along it.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape.push(n);
        let data: Vec<f64> = xv
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push("expand_last", value, Op::ExpandLast { x, n }, &[x])
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis {axis} for shape {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    pub fn reduce(&mut self, op: Reduce, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::EmptyInput("reduce"));
        }
        match op {
            Reduce::MeanRows => {
                let (n, c) = self.expect_2d("mean_rows", x)?;
                let src = self.value(x).data();
                let mut out = vec![0.0; c];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n as f64);
                let value = Tensor::new(vec![1, c], out)?;
                self.push("mean_rows", value, Op::MeanRows(x), &[x])
            }
            Reduce::AbsSum => {
                let s = xv.data().iter().map(|v| v.abs()).sum();
                self.push("abs_sum", Tensor::scalar(s), Op::AbsSum(x), &[x])
            }
            Reduce::Sum => {
                let s = xv.data().iter().sum();
                self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
            }
            Reduce::Mean => {
                let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
                self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
            }
        }
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::MeanRows, x)
    }

    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::AbsSum, x)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, x)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the gradient is
    /// zero where the clamp is active.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: pv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("bce"));
        }
        let eps = BCE_EPS;
        let total: f64 = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(eps, 1.0 - eps);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        self.push(
            "bce",
            value,
            Op::Bce {
                p,
                y: labels.to_vec(),
                eps,
            },
            &[p],
        )
    }

    /// Per-row Euclidean norm of an `N×d` tensor, floored at `eps`.
    pub fn row_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.expect_2d("row_norm", x)?;
        let src = self.value(x).data();
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let s: f64 = src[i * d..(i + 1) * d].iter().map(|v| v * v).sum();
                s.sqrt().max(eps)
            })
            .collect();
        let value = Tensor::new(vec![n], out)?;
        self.push("row_norm", value, Op::RowNorm { x, eps }, &[x])
    }

    /// Runs the backward pass from a scalar `loss`.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 || root.value.ndim() > 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::filled(root.value.shape(), 1.0));

        // Adds into the gradient slot of `v`, allocating zeros on first use.
        let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let g = g.data();
            let y = node.value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (n, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let d = nodes[b.0].value.shape()[1];
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(&mut grads, *a, &mut |ga| gemm_nt(g, bv, ga, n, d, k));
                    acc(&mut grads, *b, &mut |gb| gemm_tn(av, g, gb, n, k, d));
                }
                Op::Binary(kind, a, b, row) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let c = bv.len();
                    let bi = |i: usize| if *row { i % c } else { i };
                    match kind {
                        Binary::Add => {
                            acc(&mut grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                            acc(&mut grads, *b, &mut |gb| {
                                g.iter().enumerate().for_each(|(i, v)| gb[bi(i)] += v)
                            });
                        }
                        Binary::Sub => {
                            acc(&mut grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                            acc(&mut grads, *b, &mut |gb| {
                                g.iter().enumerate().for_each(|(i, v)| gb[bi(i)] -= v)
                            });
                        }
                        Binary::Mul => {
                            acc(&mut grads, *a, &mut |ga| {
                                g.iter().enumerate().for_each(|(i, v)| ga[i] += v * bv[bi(i)])
                            });
                            acc(&mut grads, *b, &mut |gb| {
                                g.iter().enumerate().for_each(|(i, v)| gb[bi(i)] += v * av[i])
                            });
                        }
                        Binary::Div => {
                            acc(&mut grads, *a, &mut |ga| {
                                g.iter().enumerate().for_each(|(i, v)| ga[i] += v / bv[bi(i)])
                            });
                            acc(&mut grads, *b, &mut |gb| {
                                g.iter().enumerate().for_each(|(i, v)| {
                                    let den = bv[bi(i)];
                                    gb[bi(i)] -= v * av[i] / (den * den)
                                })
                            });
                        }
                    }
                }
                Op::Unary(kind, a) => {
                    let xv = nodes[a.0].value.data();
                    acc(&mut grads, *a, &mut |ga| match kind {
                        Unary::Relu => {
                            for i in 0..ga.len() {
                                if xv[i] > 0.0 {
                                    ga[i] += g[i];
                                }
                            }
                        }
                        Unary::Sigmoid => {
                            for i in 0..ga.len() {
                                ga[i] += g[i] * y[i] * (1.0 - y[i]);
                            }
                        }
                        Unary::Abs => {
                            for i in 0..ga.len() {
                                ga[i] += g[i] * sign(xv[i]);
                            }
                        }
                    });
                }
                Op::Scale(a, factor) => {
                    acc(&mut grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * factor));
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    acc(&mut grads, *x, &mut |gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dot = 0.0;
                                for l in 0..len {
                                    dot += y[base + l * inner] * g[base + l * inner];
                                }
                                for l in 0..len {
                                    let at = base + l * inner;
                                    gx[at] += y[at] * (g[at] - dot);
                                }
                            }
                        }
                    });
                }
                Op::Gather { x, ids } => {
                    let w = nodes[x.0].value.row_len();
                    acc(&mut grads, *x, &mut |gx| {
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut gx[id * w..(id + 1) * w];
                            dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(o, v)| *o += v);
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc(&mut grads, *x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                }
                Op::Transpose(x) => {
                    let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    acc(&mut grads, *x, &mut |gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Stack(xs) => {
                    let (n, k, d) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                    for (j, &x) in xs.iter().enumerate() {
                        acc(&mut grads, x, &mut |gx| {
                            for i in 0..n {
                                let src = &g[(i * k + j) * d..(i * k + j + 1) * d];
                                gx[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                            }
                        });
                    }
                }
                Op::ExpandLast { x, n } => {
                    acc(&mut grads, *x, &mut |gx| {
                        for (i, o) in gx.iter_mut().enumerate() {
                            *o += g[i * n..(i + 1) * n].iter().sum::<f64>();
                        }
                    });
                }
                Op::SumAxis { x, axis } => {
                    let (outer, len, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                    acc(&mut grads, *x, &mut |gx| {
                        for o in 0..outer {
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for i in 0..inner {
                                    gx[base + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::MeanRows(x) => {
                    let n = nodes[x.0].value.shape()[0];
                    let c = g.len();
                    acc(&mut grads, *x, &mut |gx| {
                        for (i, o) in gx.iter_mut().enumerate() {
                            *o += g[i % c] / n as f64;
                        }
                    });
                }
                Op::AbsSum(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(&mut grads, *x, &mut |gx| {
                        for (o, v) in gx.iter_mut().zip(xv) {
                            *o += g[0] * sign(*v);
                        }
                    });
                }
                Op::Sum(x) => {
                    acc(&mut grads, *x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.numel() as f64;
                    acc(&mut grads, *x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
                }
                Op::Bce { p, y: labels, eps } => {
                    let pv = nodes[p.0].value.data();
                    let n = labels.len() as f64;
                    acc(&mut grads, *p, &mut |gp| {
                        for i in 0..gp.len() {
                            let (pi, yi) = (pv[i], labels[i]);
                            if pi > *eps && pi < 1.0 - eps {
                                gp[i] += g[0] * (-yi / pi + (1.0 - yi) / (1.0 - pi)) / n;
                            }
                        }
                    });
                }
                Op::RowNorm { x, eps } => {
                    let xv = nodes[x.0].value.data();
                    let d = nodes[x.0].value.shape()[1];
                    acc(&mut grads, *x, &mut |gx| {
                        for (i, &norm) in y.iter().enumerate() {
                            let raw: f64 = xv[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                            if raw > *eps {
                                for j in 0..d {
                                    gx[i * d + j] += g[i] * xv[i * d + j] / norm;
                                }
                            }
                        }
                    });
                }
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// Subgradient of |x| with sign(0) = 0.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
