//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is the tape: every op appends a node holding its value and
//! the handles of its inputs. [`Graph::backward`] walks the nodes in reverse
//! creation order, which is a valid topological order because a node can only
//! reference nodes created before it.

use std::collections::BTreeMap;

use rand::Rng;

use super::linalg::{gemm, same_geometry};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
    Square,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Embed {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    Conv1d {
        x: Var,
        k: Var,
        geo: Conv1dGeometry,
    },
    Conv2d {
        x: Var,
        k: Var,
        geo: Conv2dGeometry,
    },
    MaxPoolTime {
        x: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug)]
struct Conv1dGeometry {
    t_in: usize,
    c_in: usize,
    width: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeometry {
    h_in: usize,
    w_in: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    h_out: usize,
    w_out: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape. One graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that participates in differentiation.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a differentiable leaf. Repeated calls for
    /// the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    /// Gradients of every parameter bound with [`Graph::param`].
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let value = self.value(x).map(|v| unary_value(op, v));
        let rg = self.rg(x);
        self.push(value, Op::Unary(op, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Ln, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::dim(format!("cannot broadcast {sa:?} with {sb:?} for {op:?}"))
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = binary_fn(op);
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(sa, &out_shape);
            let ib = broadcast_index(sb, &out_shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, 1.0)
    }

    // ---- linear algebra & reductions --------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim(format!("transpose of {:?}", self.shape(x))));
        }
        let value = self.value(x).transposed();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums a 2-D tensor over `axis`, dropping that axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || axis > 1 {
            return Err(Error::dim(format!("sum_axis({axis}) of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            Tensor::new(vec![c], out)?
        } else {
            Tensor::new(vec![r], d.chunks(c).map(|row| row.iter().sum()).collect())?
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumAxis(x, axis), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!(
                    "concat along {axis}: {base:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim(format!(
                "narrow axis {axis} [{start}, {}) of {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Row `i` of a 2-D tensor as a `[1 × C]` tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.narrow(x, 0, i, 1)
    }

    /// Places `x` at offset `start` along `axis` inside a zero tensor whose
    /// extent on that axis is `total`.
    pub fn embed(&mut self, x: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + s[axis] > total {
            return Err(Error::dim(format!(
                "embed {s:?} at {start} along {axis} into {total}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        let d = self.value(x).data();
        let block = s[axis] * inner;
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out[dst..dst + block].copy_from_slice(&d[o * block..(o + 1) * block]);
        }
        let mut shape = s;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Embed { x, axis, start }, rg))
    }

    /// Rows of a 2-D `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::dim(format!("gather_rows from {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Vocabulary { id: bad, vocab: n });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let n = *s.last().expect("rank ≥ 1");
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(s.to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(self.shape(x).to_vec(), mask)?);
        self.mul(x, m)
    }

    // ---- convolution & pooling --------------------------------------------

    /// Cross-correlation of `x: [T × Cin]` with `kernel: [k × Cin × Cout]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::dim(format!("conv1d input {sx:?} with kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv1d stride must be ≥ 1"));
        }
        let (t_in, c_in, width, c_out) = (sx[0], sx[1], sk[0], sk[2]);
        let (t_out, pad) = match padding {
            Padding::Same => same_geometry(t_in, width, stride),
            Padding::Valid => {
                if width > t_in {
                    return Err(Error::dim(format!(
                        "conv1d kernel width {width} exceeds input length {t_in}"
                    )));
                }
                ((t_in - width) / stride + 1, 0)
            }
        };
        let geo = Conv1dGeometry {
            t_in,
            c_in,
            width,
            c_out,
            stride,
            pad,
            t_out,
        };
        let cols = im2col_1d(self.value(x).data(), &geo);
        let mut out = vec![0.0; t_out * c_out];
        gemm(
            t_out,
            width * c_in,
            c_out,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![t_out, c_out], out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(value, Op::Conv1d { x, k: kernel, geo }, rg))
    }

    /// Cross-correlation of `x: [H × W × Cin]` with `kernel: [kh × kw × Cin × Cout]`,
    /// zero "same" padding on both axes.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[2] {
            return Err(Error::dim(format!("conv2d input {sx:?} with kernel {sk:?}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::contract("conv2d stride must be ≥ 1"));
        }
        let (h_out, ph) = same_geometry(sx[0], sk[0], stride.0);
        let (w_out, pw) = same_geometry(sx[1], sk[1], stride.1);
        let geo = Conv2dGeometry {
            h_in: sx[0],
            w_in: sx[1],
            c_in: sx[2],
            kh: sk[0],
            kw: sk[1],
            c_out: sk[3],
            sh: stride.0,
            sw: stride.1,
            ph,
            pw,
            h_out,
            w_out,
        };
        let cols = im2col_2d(self.value(x).data(), &geo);
        let mut out = vec![0.0; h_out * w_out * geo.c_out];
        gemm(
            h_out * w_out,
            geo.kh * geo.kw * geo.c_in,
            geo.c_out,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![h_out, w_out, geo.c_out], out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(value, Op::Conv2d { x, k: kernel, geo }, rg))
    }

    /// Max pooling along axis 0 of `[T × C]` with stride 1; the window
    /// `[t, t+width)` is clipped at the end so the length is preserved.
    pub fn max_pool_time(&mut self, x: Var, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || width == 0 {
            return Err(Error::dim(format!("max_pool_time width {width} on {s:?}")));
        }
        let (t, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; t * c];
        let mut argmax = vec![0; t * c];
        for i in 0..t {
            for ch in 0..c {
                let mut best = i * c + ch;
                for j in i + 1..(i + width).min(t) {
                    if d[j * c + ch] > d[best] {
                        best = j * c + ch;
                    }
                }
                out[i * c + ch] = d[best];
                argmax[i * c + ch] = best;
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPoolTime { x, argmax }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d`loss`/d`v` into every differentiable ancestor `v`, then
    /// clears the tape. Values and gradients stay readable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xv = nodes[x.0].value.data();
                let yv = node.value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * unary_deriv(*op, xv[k], yv[k]);
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let out_shape = node.value.shape();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let (ia, ib): (Vec<usize>, Vec<usize>) = if sa == sb {
                    ((0..g.len()).collect(), (0..g.len()).collect())
                } else {
                    (
                        broadcast_index(sa, out_shape),
                        broadcast_index(sb, out_shape),
                    )
                };
                if let Some(ga) = acc(grads, nodes, *a) {
                    for k in 0..g.len() {
                        let y = bv[ib[k]];
                        ga[ia[k]] += g[k]
                            * match op {
                                BinaryOp::Add | BinaryOp::Sub => 1.0,
                                BinaryOp::Mul => y,
                                BinaryOp::Div => 1.0 / y,
                            };
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for k in 0..g.len() {
                        let (x, y) = (av[ia[k]], bv[ib[k]]);
                        gb[ib[k]] += g[k]
                            * match op {
                                BinaryOp::Add => 1.0,
                                BinaryOp::Sub => -1.0,
                                BinaryOp::Mul => x,
                                BinaryOp::Div => -x / (y * y),
                            };
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = acc(grads, nodes, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = acc(grads, nodes, *x) {
                    // y[i][j] = x[j][i]
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let axis = *axis;
                if let Some(gx) = acc(grads, nodes, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = acc(grads, nodes, p) {
                        let block = len * inner;
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (d, s) in gp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&g[src..src + block])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = nodes[x.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let full = s[*axis];
                if let Some(gx) = acc(grads, nodes, *x) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        for (d, s) in gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Embed { x, axis, start } => {
                let s = nodes[x.0].value.shape();
                let len = s[*axis];
                let total = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for o in 0..outer {
                        let src = (o * total + start) * inner;
                        for (d, s) in gx[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let d = nodes[table.0].value.shape()[1];
                if let Some(gt) = acc(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            gxr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::Conv1d { x, k, geo } => {
                let kdim = geo.width * geo.c_in;
                if nodes[k.0].requires_grad {
                    let cols = im2col_1d(nodes[x.0].value.data(), geo);
                    let gk = acc(grads, nodes, *k).unwrap();
                    gemm(kdim, geo.t_out, geo.c_out, &cols, true, g, false, gk, true);
                }
                let kv = nodes[k.0].value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    let mut dcols = vec![0.0; geo.t_out * kdim];
                    gemm(geo.t_out, geo.c_out, kdim, g, false, kv, true, &mut dcols, false);
                    col2im_1d(&dcols, geo, gx);
                }
            }
            Op::Conv2d { x, k, geo } => {
                let kdim = geo.kh * geo.kw * geo.c_in;
                let rows = geo.h_out * geo.w_out;
                if nodes[k.0].requires_grad {
                    let cols = im2col_2d(nodes[x.0].value.data(), geo);
                    let gk = acc(grads, nodes, *k).unwrap();
                    gemm(kdim, rows, geo.c_out, &cols, true, g, false, gk, true);
                }
                let kv = nodes[k.0].value.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    let mut dcols = vec![0.0; rows * kdim];
                    gemm(rows, geo.c_out, kdim, g, false, kv, true, &mut dcols, false);
                    col2im_2d(&dcols, geo, gx);
                }
            }
            Op::MaxPoolTime { x, argmax } => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn unary_value(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Ln => x.ln(),
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Relu => x.max(0.0),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Square => x * x,
        UnaryOp::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
    }
}

/// dy/dx given the input `x` and output `y`.
fn unary_deriv(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::Neg => -1.0,
        UnaryOp::Exp => y,
        UnaryOp::Ln => 1.0 / x,
        UnaryOp::Tanh => 1.0 - y * y,
        UnaryOp::Sigmoid => y * (1.0 - y),
        // subgradient at 0 is 0
        UnaryOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Sqrt => 0.5 / y,
        UnaryOp::Square => 2.0 * x,
        UnaryOp::Softplus => sigmoid(x),
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

fn binary_fn(op: BinaryOp) -> fn(f64, f64) -> f64 {
    match op {
        BinaryOp::Add => |a, b| a + b,
        BinaryOp::Sub => |a, b| a - b,
        BinaryOp::Mul => |a, b| a * b,
        BinaryOp::Div => |a, b| a / b,
    }
}

/// Trailing-dimension broadcasting: shapes are right-aligned and each pair of
/// extents must agree or one of them must be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out`, the flat index of the operand element it reads.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let lead = n - shape.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0; n];
    let mut offset = 0;
    for _ in 0..total {
        idx.push(offset);
        for d in (0..n).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn im2col_1d(x: &[f64], g: &Conv1dGeometry) -> Vec<f64> {
    let kdim = g.width * g.c_in;
    let mut cols = vec![0.0; g.t_out * kdim];
    for t in 0..g.t_out {
        let origin = (t * g.stride) as isize - g.pad as isize;
        for w in 0..g.width {
            let src = origin + w as isize;
            if src < 0 || src >= g.t_in as isize {
                continue;
            }
            let src = src as usize;
            let dst = t * kdim + w * g.c_in;
            cols[dst..dst + g.c_in].copy_from_slice(&x[src * g.c_in..(src + 1) * g.c_in]);
        }
    }
    cols
}

fn col2im_1d(cols: &[f64], g: &Conv1dGeometry, dx: &mut [f64]) {
    let kdim = g.width * g.c_in;
    for t in 0..g.t_out {
        let origin = (t * g.stride) as isize - g.pad as isize;
        for w in 0..g.width {
            let src = origin + w as isize;
            if src < 0 || src >= g.t_in as isize {
                continue;
            }
            let src = src as usize;
            let c = t * kdim + w * g.c_in;
            for (d, v) in dx[src * g.c_in..(src + 1) * g.c_in]
                .iter_mut()
                .zip(&cols[c..c + g.c_in])
            {
                *d += v;
            }
        }
    }
}

fn im2col_2d(x: &[f64], g: &Conv2dGeometry) -> Vec<f64> {
    let kdim = g.kh * g.kw * g.c_in;
    let mut cols = vec![0.0; g.h_out * g.w_out * kdim];
    for_each_tap_2d(g, |row, col_off, src| {
        let dst = row * kdim + col_off;
        cols[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
    });
    cols
}

fn col2im_2d(cols: &[f64], g: &Conv2dGeometry, dx: &mut [f64]) {
    let kdim = g.kh * g.kw * g.c_in;
    for_each_tap_2d(g, |row, col_off, src| {
        let c = row * kdim + col_off;
        for (d, v) in dx[src..src + g.c_in].iter_mut().zip(&cols[c..c + g.c_in]) {
            *d += v;
        }
    });
}

/// Visits every in-bounds kernel tap: (output row, column offset within the
/// patch, flat input offset of the first channel).
fn for_each_tap_2d(g: &Conv2dGeometry, mut f: impl FnMut(usize, usize, usize)) {
    for oh in 0..g.h_out {
        for ow in 0..g.w_out {
            let row = oh * g.w_out + ow;
            for i in 0..g.kh {
                let h = (oh * g.sh + i) as isize - g.ph as isize;
                if h < 0 || h >= g.h_in as isize {
                    continue;
                }
                for j in 0..g.kw {
                    let w = (ow * g.sw + j) as isize - g.pw as isize;
                    if w < 0 || w >= g.w_in as isize {
                        continue;
                    }
                    let src = (h as usize * g.w_in + w as usize) * g.c_in;
                    f(row, (i * g.kw + j) * g.c_in, src);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let s = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 1]);
        assert_eq!(g.value(s).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn unary_values_and_derivatives() {
        let mut g = Graph::new();
        let z = g.input(Tensor::scalar(0.0));
        let e = g.exp(z);
        assert_eq!(g.value(e).item(), 1.0);
        let th = g.tanh(z);
        assert_eq!(g.value(th).item(), 0.0);
        g.backward(th).unwrap();
        assert_eq!(g.grad(z).unwrap().item(), 1.0);

        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn square_and_reuse_accumulate() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.input(t(&[3], &[10.0, 20.0, 30.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        let bad = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(g.add(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1d_hand_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let ident = g.constant(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, ident, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        let box3 = g.constant(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let y = g.conv1d(x, box3, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
        let y = g.conv1d(x, box3, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
        let wide = g.constant(Tensor::zeros(vec![4, 1, 1]));
        assert!(g.conv1d(x, wide, 1, Padding::Valid).is_err());
    }

    #[test]
    fn conv2d_identity_and_stride_shape() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..5 * 80).map(|v| v as f64).collect();
        let x = g.constant(t(&[5, 80, 1], &data));
        let ident = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, ident, (1, 1)).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let k = g.constant(Tensor::full(vec![3, 3, 1, 2], 0.1));
        let y = g.conv2d(x, k, (1, 2)).unwrap();
        assert_eq!(g.shape(y), &[5, 40, 2]);
        let k2 = g.constant(Tensor::full(vec![3, 3, 2, 4], 0.1));
        let y = g.conv2d(y, k2, (3, 2)).unwrap();
        assert_eq!(g.shape(y), &[2, 20, 4]);
    }

    #[test]
    fn softmax_and_dropout_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let d = g.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(d, x);
    }

    #[test]
    fn narrow_embed_concat_roundtrip() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let n = g.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).data(), &[2.0, 3.0, 5.0, 6.0]);
        let e = g.embed(n, 1, 1, 4).unwrap();
        assert_eq!(
            g.value(e).data(),
            &[0.0, 2.0, 3.0, 0.0, 0.0, 5.0, 6.0, 0.0]
        );
        let c = g.concat(&[x, n], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        assert_eq!(g.value(c).row(1), &[4.0, 5.0, 6.0, 5.0, 6.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0, 2.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn max_pool_keeps_length() {
        let mut g = Graph::new();
        let x = g.input(t(&[4, 1], &[1.0, 3.0, 2.0, 0.0]));
        let y = g.max_pool_time(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0, 2.0, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_rows_checks_vocabulary() {
        let mut g = Graph::new();
        let table = g.input(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            g.gather_rows(table, &[0, 3]),
            Err(Error::Vocabulary { id: 3, vocab: 3 })
        ));
        let r = g.gather_rows(table, &[2, 2]).unwrap();
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
