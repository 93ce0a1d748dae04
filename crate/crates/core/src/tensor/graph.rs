//! Reverse-mode differentiation over an eagerly evaluated tape.
//!
//! Every operation computes its value immediately and appends a node holding
//! the value and the recipe needed for its vector-Jacobian product. Inputs
//! always precede their consumers, so the tape order is a valid topological
//! order and `backward` is a single reverse sweep.

use super::array::{matmul_kernel, transpose_kernel, Tensor};
use crate::error::{Error, Result};

/// Cosine values are clamped to `[-1 + ARCCOS_CLAMP, 1 - ARCCOS_CLAMP]` before `acos`.
pub const ARCCOS_CLAMP: f64 = 1e-7;
/// Inputs further than this outside `[-1, 1]` are a domain error for `acos`.
pub const ARCCOS_DOMAIN_SLACK: f64 = 1e-9;

/// Handle to a node on a [`Graph`].
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Acos(Var),
    Sqrt(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    SumLast(Var),
    Reshape(Var),
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { x: Var, index: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            Transpose(x) | Scale(x, _) | Gelu(x) | Acos(x) | Sqrt(x) | Sum(x) | SumLast(x)
            | Reshape(x) => vec![*x],
            Softmax { x, .. } | GatherRows { x, .. } | SliceCols { x, .. } | Gather { x, .. } => {
                vec![*x]
            }
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatRows(xs) | ConcatCols(xs) => xs.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of tensor operations that can be differentiated in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn clamp_cos(x: f64) -> f64 {
    x.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| Error::Shape {
            op,
            lhs: self.shape(v).to_vec(),
            rhs: vec![],
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let out = transpose_kernel(self.value(x).data(), r, c);
        self.push("transpose", Tensor::new([c, r], out)?, Op::Transpose(x))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)?
        } else if vb.len() == 1 {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else if va.len() == 1 {
            let x = va.item();
            vb.map(|y| f(x, y))
        } else {
            return Err(self.shape_err(name, a, b));
        };
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2("add_row", x)?;
        if self.value(row).len() != n {
            return Err(self.shape_err("add_row", x, row));
        }
        let r = self.value(row).data();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        self.push("add_row", value, Op::AddRow(x, row))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push("gelu", value, Op::Gelu(x))
    }

    /// `acos` of the input clamped to `[-1 + ARCCOS_CLAMP, 1 - ARCCOS_CLAMP]`.
    pub fn acos(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self
            .value(x)
            .data()
            .iter()
            .find(|v| v.abs() > 1.0 + ARCCOS_DOMAIN_SLACK)
        {
            return Err(Error::Domain {
                op: "acos",
                value: bad,
            });
        }
        let value = self.value(x).map(|v| clamp_cos(v).acos());
        self.push("acos", value, Op::Acos(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                value: bad,
            });
        }
        let value = self.value(x).map(f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(x))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x, axis })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.value(gain).len() != n {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != n {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis; `[.., n]` becomes `[..]` (or `[1]` for a vector).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().unwrap();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let data = self.value(x).data().chunks(n).map(|c| c.iter().sum()).collect();
        self.push("sum_last", Tensor::new(out_shape, data)?, Op::SumLast(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("gather_rows", x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(x);
        let data: Vec<f64> = index.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        let value = Tensor::new([index.len(), cols], data)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, cols) = self.dims2("concat_rows", xs[0])?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims2("concat_rows", x)?;
            if c != cols {
                return Err(self.shape_err("concat_rows", xs[0], x));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        self.push(
            "concat_rows",
            Tensor::new([rows, cols], data)?,
            Op::ConcatRows(xs.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if start + len > cols || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} of {cols} columns",
                start + len
            )));
        }
        let src = self.value(x);
        let data: Vec<f64> = (0..rows)
            .flat_map(|r| src.row(r)[start..start + len].iter().copied())
            .collect();
        self.push(
            "slice_cols",
            Tensor::new([rows, len], data)?,
            Op::SliceCols { x, start },
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let (rows, _) = self.dims2("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2("concat_cols", x)?;
            if r != rows {
                return Err(self.shape_err("concat_cols", xs[0], x));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        self.push(
            "concat_cols",
            Tensor::new([rows, total], data)?,
            Op::ConcatCols(xs.to_vec()),
        )
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather { x, index })
    }

    /// Mean softmax cross-entropy of `n × C` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy: {} targets for {n}×{c} logits",
                targets.len()
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_total = total.ln() + max;
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_total).exp();
            }
            loss += log_total - row[targets[r]];
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every node that requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let Some(input) = node.op.inputs().into_iter().find(|v| v.0 >= i) {
                return Err(Error::Cycle {
                    node: i,
                    input: input.0,
                });
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        // Accumulates `contrib` into the gradient slot of `v`.
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                if needs(*a) {
                    let bt = transpose_kernel(val(*b), k, n);
                    let da = matmul_kernel(g, &bt, m, n, k);
                    acc(*a, &mut |s| add_into(s, &da));
                }
                if needs(*b) {
                    let at = transpose_kernel(val(*a), m, k);
                    let db = matmul_kernel(&at, g, k, m, n);
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let dx = transpose_kernel(g, c, r);
                acc(*x, &mut |s| add_into(s, &dx));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |s| accumulate_broadcast(s, g, |_, gi| gi));
                acc(*b, &mut |s| accumulate_broadcast(s, g, |_, gi| sign * gi));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| accumulate_broadcast(s, g, |i, gi| gi * bcast(vb, i)));
                acc(*b, &mut |s| accumulate_broadcast(s, g, |i, gi| gi * bcast(va, i)));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| accumulate_broadcast(s, g, |i, gi| gi / bcast(vb, i)));
                acc(*b, &mut |s| {
                    accumulate_broadcast(s, g, |i, gi| {
                        let d = bcast(vb, i);
                        -gi * bcast(va, i) / (d * d)
                    })
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi * c)
            }),
            Op::AddRow(x, row) => {
                acc(*x, &mut |s| add_into(s, g));
                let n = self.nodes[row.0].value.len();
                acc(*row, &mut |s| {
                    for chunk in g.chunks(n) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(vx) {
                        *s += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::Acos(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(vx) {
                        let c = clamp_cos(*xi);
                        *s -= gi / (1.0 - c * c).sqrt();
                    }
                });
            }
            Op::Sqrt(x) => acc(*x, &mut |s| {
                for ((s, gi), yi) in s.iter_mut().zip(g).zip(out) {
                    *s += gi * 0.5 / yi;
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.nodes[gain.0].value.len();
                let gv = val(*gain);
                acc(*gain, &mut |s| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            s[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for gr in g.chunks(n) {
                        add_into(s, gr);
                    }
                });
                acc(*x, &mut |s| {
                    let nf = n as f64;
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            s[r * n + c] +=
                                rstd[r] / nf * (nf * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::SumLast(x) => {
                let n = *self.nodes[x.0].value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (chunk, gi) in s.chunks_mut(n).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gi);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::GatherRows { x, index } => {
                let cols = *self.nodes[x.0].value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut s[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.len();
                    acc(x, &mut |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.nodes[x.0].value.dims2().unwrap().1;
                let (rows, len) = node.value.dims2().unwrap();
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        add_into(
                            &mut s[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let w = self.nodes[x.0].value.dims2().unwrap().1;
                    acc(x, &mut |s| {
                        for r in 0..rows {
                            add_into(
                                &mut s[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { x, index } => acc(*x, &mut |s| {
                for (gi, &src) in g.iter().zip(index) {
                    s[src] += gi;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.nodes[logits.0].value.dims2().unwrap().1;
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Accumulates `f(i, g[i])` into `slot`, summing when `slot` is a broadcast scalar.
fn accumulate_broadcast(slot: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if slot.len() == g.len() {
        for (i, (s, gi)) in slot.iter_mut().zip(g).enumerate() {
            *s += f(i, *gi);
        }
    } else {
        slot[0] += g.iter().enumerate().map(|(i, gi)| f(i, *gi)).sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, -2.0, 3.5]));
        let z = g.constant(Tensor::zeros([3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn acos_boundary_and_domain() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let a = g.acos(one).unwrap();
        // Clamped at 1 - 1e-7, so within sqrt(2e-7).
        assert!(g.value(a).item() < 4.5e-4);
        let out = g.constant(Tensor::scalar(1.0 + 1e-6));
        assert!(matches!(g.acos(out), Err(Error::Domain { .. })));
        let slack = g.constant(Tensor::scalar(1.0 + 1e-10));
        assert!(g.acos(slack).is_ok());
    }

    #[test]
    fn gelu_exact_erf_form() {
        // x·Φ(x) at x = 1, Φ(1) = 0.841344746068543.
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        let y = g.gelu(x).unwrap();
        assert!((g.value(y).item() - 0.841344746068543).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // Scalar exp/sum oracle.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        for (got, want) in g.value(y).data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
        for (got, ei) in g.value(y).data().iter().zip(&e) {
            assert!((got - ei / total).abs() < 1e-15);
        }

        let shifted = g.constant(t(&[3], &[101.0, 102.0, 103.0]));
        let ys = g.softmax(shifted, 0).unwrap();
        for (a, b) in g.value(ys).data().iter().zip(g.value(y).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones([3]));
        let bias = g.constant(Tensor::zeros([3]));

        let c = g.constant(t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        // mean 2, var 2/3 -> ±1/sqrt(2/3) = ±1.224744871
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_output_statistics_follow_affine() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 5], &[0.3, -1.7, 2.2, 0.9, -0.4]));
        let gain = g.constant(Tensor::full([5], -2.5));
        let bias = g.constant(Tensor::full([5], 0.75));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / 5.0;
        let std = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        assert!((mean - 0.75).abs() < 1e-12);
        assert!((std - 2.5).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn backward_of_trace_x_xt_is_2x() {
        let data = [0.5, -1.0, 2.0, 1.5, 0.25, -0.75];
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &data));
        let xt = g.transpose(x).unwrap();
        let xxt = g.matmul(x, xt).unwrap();
        // trace = sum of the diagonal, gathered from the flat layout.
        let diag = g.gather(xxt, vec![0, 3], [2]).unwrap();
        let tr = g.sum(diag).unwrap();
        let grads = g.backward(tr).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), want.as_slice());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -2.0]));
        let sq = g.mul(x, x).unwrap(); // d = 2x
        let tri = g.scale(x, 3.0).unwrap(); // d = 3
        let both = g.add(sq, tri).unwrap();
        let s = g.sum(both).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones([2]));
        let c = g.constant(Tensor::full([2], 2.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, s).unwrap();
        let r = g.sum(y).unwrap();
        let grads = g.backward(r).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.div(a, z), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2]));
        let b = g.constant(Tensor::zeros([3]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }
}
