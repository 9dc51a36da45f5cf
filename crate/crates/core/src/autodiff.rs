//! Tape-based reverse-mode differentiation over the operation set the
//! encoder needs.
//!
//! Every op appends a node holding its output value and enough saved state to
//! apply its adjoint. [`Tape::backward`] walks the nodes in reverse
//! registration order, visiting each exactly once. Leaves may borrow their
//! tensors, so recording a forward pass over large weights copies nothing.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Scalar, Tensor};

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: Scalar = 1e-5;

/// Handle to a node on a [`Tape`].
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
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: Scalar,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<Scalar>,
        inv_std: Vec<Scalar>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Row {
        x: Var,
        index: usize,
    },
    Sum {
        x: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Map {
        x: Var,
        deriv: Vec<Scalar>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Scalar>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// reach the loss.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn data(&self, var: Var) -> Option<&[Scalar]> {
        self.grads[var.0].as_deref()
    }

    /// Writes the gradient of `var` into `target.grad`.
    pub fn write_into(&self, var: Var, target: &mut Tensor) {
        target.grad = Some(self.get(var).into_data());
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and the references they hold.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf owning `t`.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (br, bc) = bv.dims2()?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        let lb = if trans_b { Layout::T } else { Layout::N };
        gemm(m, k, n, av.data(), Layout::N, bv.data(), lb, &mut out, 0.0);
        let req = self.req(&[a, b]);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul { a, b, trans_b },
            req,
        ))
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, sign: Scalar) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + sign * y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let op = if sign > 0.0 {
            Op::Add { a, b }
        } else {
            Op::Sub { a, b }
        };
        let req = self.req(&[a, b]);
        Ok(self.push(out, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", -1.0)
    }

    /// Adds `bias: [n]` to every length-`n` vector along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = xv.rows_last();
        if bv.numel() != n {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let bd = bv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(v, b)| v + b))
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        let req = self.req(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, req))
    }

    pub fn scale(&mut self, x: Var, factor: Scalar) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * factor).collect())?;
        let req = self.req(&[x]);
        Ok(self.push(out, Op::Scale { x, factor }, req))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| gelu(v)).collect())?;
        let req = self.req(&[x]);
        Ok(self.push(out, Op::Gelu { x }, req))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = xv.rows_last();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape(), data)?;
        let req = self.req(&[x]);
        Ok(self.push(out, Op::Softmax { x }, req))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// population variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Scalar) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = xv.rows_last();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let mut normed = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                normed[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let req = self.req(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            req,
        ))
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if width == 0 || start + width > c {
            return Err(Error::dim("slice_cols", xv.shape(), &[start, width]));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let out = Tensor::new(&[r, width], data)?;
        let req = self.req(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, req))
    }

    /// Side-by-side concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.shape(*first),
                    self.shape(*p),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let req = self.req(parts);
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Stacks tensors along the row axis; a rank-1 `[d]` part counts as one row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let d = self.value(*first).rows_last().1;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.rows_last().1 != d || v.shape().len() > 2 {
                return Err(Error::dim("concat_rows", self.shape(*first), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / d;
        let out = Tensor::new(&[rows, d], data)?;
        let req = self.req(parts);
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let req = self.req(&[x]);
        Ok(self.push(out, Op::Reshape { x }, req))
    }

    /// Row `index` of a rank-2 tensor, as a rank-1 tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if index >= r {
            return Err(Error::dim("row", xv.shape(), &[index]));
        }
        let out = Tensor::new(&[c], xv.row(index).to_vec())?;
        let req = self.req(&[x]);
        Ok(self.push(out, Op::Row { x, index }, req))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, req))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = mse_loss(self.value(pred), self.value(target))?;
        let req = self.req(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, req))
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map<F, D>(&mut self, x: Var, f: F, df: D) -> Result<Var>
    where
        F: Fn(Scalar) -> Scalar,
        D: Fn(Scalar) -> Scalar,
    {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())?;
        let deriv = xv.data().iter().map(|&v| df(v)).collect();
        let req = self.req(&[x]);
        Ok(self.push(out, Op::Map { x, deriv }, req))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<Scalar>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Accumulation buffer for `v`, or None when `v` takes no gradient.
    fn slot<'g>(
        &self,
        grads: &'g mut [Option<Vec<Scalar>>],
        v: Var,
    ) -> Option<&'g mut Vec<Scalar>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        macro_rules! with_buf {
            ($v:expr, |$b:ident| $body:expr) => {
                if let Some($b) = self.slot(grads, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("rank 2");
                let n = out.shape()[1];
                if *trans_b {
                    with_buf!(*a, |ga| gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::N,
                        bv.data(),
                        Layout::N,
                        ga,
                        1.0
                    ));
                    with_buf!(*b, |gb| gemm(
                        n,
                        m,
                        k,
                        g,
                        Layout::T,
                        av.data(),
                        Layout::N,
                        gb,
                        1.0
                    ));
                } else {
                    with_buf!(*a, |ga| gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::N,
                        bv.data(),
                        Layout::T,
                        ga,
                        1.0
                    ));
                    with_buf!(*b, |gb| gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        Layout::T,
                        g,
                        Layout::N,
                        gb,
                        1.0
                    ));
                }
            }
            Op::Add { a, b } => {
                with_buf!(*a, |ga| axpy(ga, g, 1.0));
                with_buf!(*b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub { a, b } => {
                with_buf!(*a, |ga| axpy(ga, g, 1.0));
                with_buf!(*b, |gb| axpy(gb, g, -1.0));
            }
            Op::AddRow { x, bias } => {
                with_buf!(*x, |gx| axpy(gx, g, 1.0));
                with_buf!(*bias, |gb| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::Scale { x, factor } => with_buf!(*x, |gx| axpy(gx, g, *factor)),
            Op::Gelu { x } => with_buf!(*x, |gx| {
                for ((acc, gi), &xi) in gx.iter_mut().zip(g).zip(self.value(*x).data()) {
                    *acc += gi * gelu_grad(xi);
                }
            }),
            Op::Softmax { x } => with_buf!(*x, |gx| {
                let c = out.rows_last().1;
                for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: Scalar = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                with_buf!(*x, |gx| {
                    for r in 0..inv_std.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &normed[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as Scalar;
                        mean_dh_h /= d as Scalar;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                with_buf!(*gain, |gg| {
                    for (gr, hr) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                with_buf!(*bias, |gb| {
                    for gr in g.chunks(d) {
                        axpy(gb, gr, 1.0);
                    }
                });
            }
            Op::SliceCols { x, start } => with_buf!(*x, |gx| {
                let c = self.value(*x).shape()[1];
                let w = out.shape()[1];
                for (gxr, gr) in gx.chunks_mut(c).zip(g.chunks(w)) {
                    axpy(&mut gxr[*start..*start + w], gr, 1.0);
                }
            }),
            Op::ConcatCols { parts } => {
                let total = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    with_buf!(*p, |gp| {
                        for (gpr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(gpr, &gr[offset..offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    with_buf!(*p, |gp| axpy(gp, &g[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::Reshape { x } => with_buf!(*x, |gx| axpy(gx, g, 1.0)),
            Op::Row { x, index } => with_buf!(*x, |gx| {
                let c = g.len();
                axpy(&mut gx[index * c..(index + 1) * c], g, 1.0);
            }),
            Op::Sum { x } => with_buf!(*x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(*pred).data(), self.value(*target).data());
                let scale = 2.0 * g[0] / pv.len() as Scalar;
                with_buf!(*pred, |gp| {
                    for ((acc, p), t) in gp.iter_mut().zip(pv).zip(tv) {
                        *acc += scale * (p - t);
                    }
                });
                with_buf!(*target, |gt| {
                    for ((acc, p), t) in gt.iter_mut().zip(pv).zip(tv) {
                        *acc -= scale * (p - t);
                    }
                });
            }
            Op::Map { x, deriv } => with_buf!(*x, |gx| {
                for ((acc, gi), d) in gx.iter_mut().zip(g).zip(deriv) {
                    *acc += gi * d;
                }
            }),
        }
    }
}

fn axpy(acc: &mut [Scalar], x: &[Scalar], alpha: Scalar) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

// sqrt(2/pi)
const GELU_C: Scalar = (std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2) as Scalar;
const GELU_A: Scalar = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: Scalar) -> Scalar {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: Scalar) -> Scalar {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Stable softmax of one row.
pub fn softmax_in_place(row: &mut [Scalar]) {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `(1/M) Σ (target_i − pred_i)²`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Scalar> {
    if pred.numel() != target.numel() {
        return Err(Error::dim("mse_loss", pred.shape(), target.shape()));
    }
    let sum: Scalar = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (t - p) * (t - p))
        .sum();
    Ok(sum / pred.numel() as Scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[Scalar]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[&[1000.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        assert!(tape.value(y).data()[0] >= 1.0 - 1e-12);
        assert!(tape.value(y).is_finite());
        let x = tape.constant(t(&[&[(2.0 as Scalar).ln(), 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-6 && (d[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::ones(&[4]));
        let bias = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[4], 3.5));
        let y = tape.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let gain = tape.constant(Tensor::ones(&[2]));
        let bias = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && (d[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_moments_on_random_vector() {
        let raw: Vec<Scalar> = (0..8)
            .map(|i| ((i * 7 + 3) as Scalar).sin() * 4.0 + 1.0)
            .collect();
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::ones(&[8]));
        let bias = tape.constant(Tensor::zeros(&[8]));
        let x = tape.constant(Tensor::new(&[8], raw).unwrap());
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let d = tape.value(y).data();
        let mean = d.iter().sum::<Scalar>() / 8.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<Scalar>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(6.0) - 6.0).abs() < 1e-3);
        let want = 0.5 * (1.0 + (GELU_C * (1.0 + GELU_A)).tanh());
        assert!((gelu(1.0) - want).abs() < 1e-12);
        assert!((gelu(1.0) - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn sum_backward_gives_ones() {
        let w = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let loss = tape.sum(wv).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(wv).data(), &[1.0; 4]);
    }

    #[test]
    fn linear_backward_rows_equal_input() {
        let w = t(&[&[1.0, -2.0, 0.5], &[0.3, 0.1, 2.0]]);
        let x = t(&[&[2.0], &[-1.0], &[4.0]]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(wv, xv).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap().get(wv);
        for r in 0..2 {
            assert_eq!(g.row(r), x.data());
        }
    }

    #[test]
    fn unreachable_param_has_zero_grad() {
        let a = Tensor::ones(&[2]);
        let b = Tensor::ones(&[3]);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let loss = tape.sum(av).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(bv).data(), &[0.0; 3]);
        assert!(grads.data(bv).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let a = Tensor::ones(&[2]);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        assert!(matches!(tape.backward(av), Err(Error::Contract(_))));
    }

    #[test]
    fn mse_examples() {
        let z = Tensor::zeros(&[2]);
        let o = Tensor::ones(&[2]);
        assert_eq!(mse_loss(&z, &o).unwrap(), 1.0);
        assert_eq!(mse_loss(&o, &o).unwrap(), 0.0);
        let p = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let t = Tensor::zeros(&[3]);
        assert!((mse_loss(&p, &t).unwrap() - 14.0 / 3.0).abs() < 1e-12);
        assert!(mse_loss(&p, &o).is_err());
    }

    #[test]
    fn clear_releases_nodes() {
        let a = Tensor::ones(&[2]);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        tape.sum(av).unwrap();
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn write_into_sets_grad_slot() {
        let mut w = Tensor::ones(&[3]);
        let grads = {
            let mut tape = Tape::new();
            let wv = tape.param_owned(w.clone());
            let loss = tape.sum(wv).unwrap();
            (tape.backward(loss).unwrap(), wv)
        };
        grads.0.write_into(grads.1, &mut w);
        assert_eq!(w.grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
    }
}
