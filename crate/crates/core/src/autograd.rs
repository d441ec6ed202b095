//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` simply replays the tape in reverse.
//! Graphs are single-use and single-threaded; build one per sample.
//!
//! Binary element-wise ops broadcast between operands of equal rank where a
//! dimension is either equal or 1 on one side.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Sqrt,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ClampMin(NodeId, f64),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    SumAll(NodeId),
    Reduce {
        input: NodeId,
        axis: usize,
        kind: ReduceKind,
        /// For max/min: the flat input index selected for each output.
        arg: Vec<usize>,
    },
    Reshape(NodeId),
    Gather {
        input: NodeId,
        index: Vec<usize>,
    },
    Scatter {
        input: NodeId,
        index: Vec<usize>,
    },
    /// `out[o] += w * in[i]` for every `(o, i, w)` tap.
    SparseLinear {
        input: NodeId,
        taps: Vec<(u32, u32, f64)>,
    },
    Concat {
        inputs: Vec<NodeId>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: NodeId,
        arg: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of tensor operations that can be differentiated once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// ---------------------------------------------------------------------------
// dense kernels

/// `c = a·b + beta·c` with explicit (row, col) strides so transposed operands
/// need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
    let max_b = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
    assert!((max_a as usize) < a.len() && (max_b as usize) < b.len());
    // SAFETY: the bounds of every strided access were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain (non-recorded) matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), 0.0, &mut out);
    Tensor::new([m, n], out)
}

/// Numerically stable softmax of each row (max-shifted).
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(invalid(format!("softmax_rows needs rank 2, got {:?}", x.shape())));
    }
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c.max(1)) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for k in 0..numel {
        f(k, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary_value(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
        BinaryOp::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
        BinaryOp::Min => {
            if a <= b {
                a
            } else {
                b
            }
        }
    }
}

/// Partial derivatives `(d out/d a, d out/d b)`. Ties in max/min go to `a`.
fn binary_partials(op: BinaryOp, a: f64, b: f64) -> (f64, f64) {
    match op {
        BinaryOp::Add => (1.0, 1.0),
        BinaryOp::Sub => (1.0, -1.0),
        BinaryOp::Mul => (b, a),
        BinaryOp::Div => (1.0 / b, -a / (b * b)),
        BinaryOp::Max => {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        BinaryOp::Min => {
            if a <= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// recording

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, mut value: Tensor) -> NodeId {
        value.requires_grad = true;
        value.grad = None;
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> NodeId {
        value.requires_grad = false;
        value.grad = None;
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient recorded by the last `backward`, if this node requires one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.nodes[id.0].value.grad.take()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "broadcast",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| binary_value(op, x, y))
                .collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut out = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |k, ia, ib| out[k] = binary_value(op, da[ia], db[ib]));
            out
        };
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Min, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> NodeId {
        let t = self.value(a);
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Sqrt => f64::sqrt,
            UnaryOp::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryOp::Sigmoid => sigmoid,
        };
        let value = Tensor::from_fn(t.shape().to_vec(), |k| f(t.data()[k]));
        let rg = self.rg(a);
        self.push(value, Op::Unary(op, a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a);
        let value = Tensor::from_fn(t.shape().to_vec(), |k| t.data()[k] * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a);
        let value = Tensor::from_fn(t.shape().to_vec(), |k| t.data()[k] + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let t = self.value(a);
        let value = Tensor::from_fn(t.shape().to_vec(), |k| t.data()[k].max(floor));
        let rg = self.rg(a);
        self.push(value, Op::ClampMin(a, floor), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = softmax_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(invalid(format!("log_softmax_rows needs rank 2, got {:?}", t.shape())));
        }
        let c = t.cols().max(1);
        let mut data = t.data().to_vec();
        data.chunks_mut(c).for_each(log_softmax_in_place);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmaxRows(a), rg))
    }

    /// Sum of all elements as a 1×1 tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Reduces a rank-2 tensor along `axis` keeping the dimension
    /// (axis 1 gives `r×1`, axis 0 gives `1×c`). Max/min route the
    /// gradient to the first extremal element.
    pub fn reduce(&mut self, a: NodeId, axis: usize, kind: ReduceKind) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 || axis > 1 {
            return Err(invalid(format!("reduce needs rank 2 and axis 0|1, got {:?}/{axis}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        if (axis == 1 && c == 0) || (axis == 0 && r == 0) {
            return Err(invalid("reduction over an empty axis"));
        }
        let (outer, len) = if axis == 1 { (r, c) } else { (c, r) };
        let flat = |o: usize, i: usize| if axis == 1 { o * c + i } else { i * c + o };
        let d = t.data();
        let mut vals = Vec::with_capacity(outer);
        let mut arg = Vec::new();
        for o in 0..outer {
            match kind {
                ReduceKind::Sum => vals.push((0..len).map(|i| d[flat(o, i)]).sum()),
                ReduceKind::Max | ReduceKind::Min => {
                    let mut best = flat(o, 0);
                    for i in 1..len {
                        let k = flat(o, i);
                        let better = match kind {
                            ReduceKind::Max => d[k] > d[best],
                            _ => d[k] < d[best],
                        };
                        if better {
                            best = k;
                        }
                    }
                    vals.push(d[best]);
                    arg.push(best);
                }
            }
        }
        let shape = if axis == 1 { [r, 1] } else { [1, c] };
        let value = Tensor::new(shape, vals)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reduce { input: a, axis, kind, arg }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `out[k] = input[index[k]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::IndexOutOfRange { index: bad, len: t.numel() });
        }
        let value = Tensor::new(shape.to_vec(), index.iter().map(|&i| t.data()[i]).collect())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather { input: a, index }, rg))
    }

    /// Zeros of `shape` with `out[index[k]] += input[k]`.
    pub fn scatter(&mut self, a: NodeId, index: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if t.numel() != index.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let n: usize = shape.iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let mut out = vec![0.0; n];
        for (&i, &v) in index.iter().zip(t.data()) {
            out[i] += v;
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scatter { input: a, index }, rg))
    }

    /// A fixed sparse linear map given as `(out, in, weight)` taps.
    pub fn sparse_linear(&mut self, a: NodeId, taps: Vec<(u32, u32, f64)>, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for &(o, i, w) in &taps {
            let (o, i) = (o as usize, i as usize);
            if o >= n || i >= t.numel() {
                return Err(Error::IndexOutOfRange { index: o.max(i), len: n.min(t.numel()) });
            }
            out[o] += w * t.data()[i];
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SparseLinear { input: a, taps }, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(invalid(format!("transpose needs rank 2, got {:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let index = (0..r * c).map(|k| (k % r) * c + k / r).collect();
        self.gather(a, index, &[c, r])
    }

    /// Rows `rows` of a rank-2 tensor, in the given order.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(invalid("gather_rows needs rank 2"));
        }
        let (r, c) = (t.rows(), t.cols());
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange { index: bad, len: r });
        }
        let index = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.gather(a, index, &[rows.len(), c])
    }

    /// Places the rows of `a` at `rows` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, a: NodeId, rows: &[usize], n: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 || t.rows() != rows.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let c = t.cols();
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let index = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.scatter(a, index, &[n, c])
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 || start > end || end > t.cols() {
            return Err(invalid(format!("slice_cols {start}..{end} of {:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let w = end - start;
        let index = (0..r * w).map(|k| (k / w) * c + start + k % w).collect();
        self.gather(a, index, &[r, w])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.value(*inputs.first().ok_or_else(|| invalid("concat of nothing"))?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(invalid(format!("concat axis {axis} for rank {}", base.len())));
        }
        for &id in inputs {
            let s = self.shape(id);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = inputs.iter().map(|&id| self.shape(id)[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&id, &sz) in inputs.iter().zip(&sizes) {
                let d = self.value(id).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&id| self.rg(id));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                sizes,
            },
            rg,
        ))
    }

    /// Stride-1 convolution of a `C×H×W` input with an `O×C×k×k` kernel and
    /// optional length-`O` bias, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>, pad: usize) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(mismatch());
        }
        let (c, h, w, o, k) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws.clone(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            o,
            k,
            pad,
            oh: h + 2 * pad + 1 - k,
            ow: w + 2 * pad + 1 - k,
        };
        let hw = geom.oh * geom.ow;
        let ckk = c * k * k;
        let mut cols = vec![0.0; ckk * hw];
        im2col(self.value(x).data(), &geom, &mut cols);
        let mut out = vec![0.0; o * hw];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (row, &bv) in out.chunks_mut(hw).zip(bd) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            o,
            ckk,
            hw,
            self.value(weight).data(),
            (ckk as isize, 1),
            &cols,
            (hw as isize, 1),
            beta,
            &mut out,
        );
        let value = Tensor::new([o, geom.oh, geom.ow], out)?;
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                cols,
                geom,
            },
            rg,
        ))
    }

    /// 2×2 max-pool with stride 2 over a `C×H×W` input with even `H`, `W`.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(invalid(format!("max_pool2 needs C×H×W with even H, W; got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = (ch * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let k = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                        if d[k] > d[best] {
                            best = k;
                        }
                    }
                    out.push(d[best]);
                    arg.push(best);
                }
            }
        }
        let value = Tensor::new([c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { input: x, arg }, rg))
    }

    /// Integer-factor spatial upsampling of a `C×H×W` input. Bilinear uses
    /// half-pixel centres with edge clamping.
    pub fn upsample(&mut self, x: NodeId, factor: usize, mode: Upsample) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(invalid(format!("upsample needs C×H×W and factor ≥ 1; got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let shape = [c, oh, ow];
        match mode {
            Upsample::Nearest => {
                let index = (0..c * oh * ow)
                    .map(|k| {
                        let (ch, y, xx) = (k / (oh * ow), (k / ow) % oh, k % ow);
                        (ch * h + y / factor) * w + xx / factor
                    })
                    .collect();
                self.gather(x, index, &shape)
            }
            Upsample::Bilinear => {
                let axis_taps = |out_len: usize, in_len: usize| -> Vec<[(usize, f64); 2]> {
                    (0..out_len)
                        .map(|o| {
                            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                            let i0 = (src.floor() as usize).min(in_len - 1);
                            let i1 = (i0 + 1).min(in_len - 1);
                            let t = src - i0 as f64;
                            [(i0, 1.0 - t), (i1, t)]
                        })
                        .collect()
                };
                let ty = axis_taps(oh, h);
                let tx = axis_taps(ow, w);
                let mut taps = Vec::with_capacity(c * oh * ow * 4);
                for ch in 0..c {
                    for (y, wy) in ty.iter().enumerate() {
                        for (xx, wx) in tx.iter().enumerate() {
                            let o = ((ch * oh + y) * ow + xx) as u32;
                            for &(iy, fy) in wy {
                                for &(ix, fx) in wx {
                                    let wgt = fy * fx;
                                    if wgt != 0.0 {
                                        taps.push((o, ((ch * h + iy) * w + ix) as u32, wgt));
                                    }
                                }
                            }
                        }
                    }
                }
                self.sparse_linear(x, taps, &shape)
            }
        }
    }

    // -----------------------------------------------------------------------
    // backward

    /// Reverse pass from a one-element `loss`. Afterwards every node that
    /// requires a gradient holds one; nodes off the loss path hold zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.requires_grad {
                Some(g.unwrap_or_else(|| vec![0.0; node.value.numel()]))
            } else {
                None
            };
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        // Accumulator for an input, allocated lazily; `None` when the input
        // does not need a gradient.
        fn acc<'a>(graph: &Graph, grads: &'a mut [Option<Vec<f64>>], input: NodeId) -> Option<&'a mut Vec<f64>> {
            if !graph.rg(input) {
                return None;
            }
            let n = graph.value(input).numel();
            Some(grads[input.0].get_or_insert_with(|| vec![0.0; n]))
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = acc(self, grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), 1.0, ga);
                }
                if let Some(gb) = acc(self, grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), 1.0, gb);
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let out_shape = out.shape();
                let sa = broadcast_strides(ta.shape(), out_shape);
                let sb = broadcast_strides(tb.shape(), out_shape);
                let need_a = self.rg(*a);
                let need_b = self.rg(*b);
                let mut buf_a = need_a.then(|| vec![0.0; ta.numel()]);
                let mut buf_b = need_b.then(|| vec![0.0; tb.numel()]);
                for_each_broadcast(out_shape, &sa, &sb, |k, ia, ib| {
                    let (pa, pb) = binary_partials(*op, da[ia], db[ib]);
                    if let Some(ga) = buf_a.as_mut() {
                        ga[ia] += g[k] * pa;
                    }
                    if let Some(gb) = buf_b.as_mut() {
                        gb[ib] += g[k] * pb;
                    }
                });
                if let (Some(src), Some(dst)) = (buf_a, acc(self, grads, *a)) {
                    add_into(dst, &src);
                }
                if let (Some(src), Some(dst)) = (buf_b, acc(self, grads, *b)) {
                    add_into(dst, &src);
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = out.data();
                if let Some(ga) = acc(self, grads, *a) {
                    for k in 0..g.len() {
                        let d = match op {
                            UnaryOp::Exp => y[k],
                            UnaryOp::Log => 1.0 / x[k],
                            UnaryOp::Sqrt => 0.5 / y[k],
                            UnaryOp::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sigmoid => y[k] * (1.0 - y[k]),
                        };
                        ga[k] += g[k] * d;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc(self, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = acc(self, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                if let Some(ga) = acc(self, grads, *a) {
                    for k in 0..g.len() {
                        if x[k] > *floor {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols().max(1);
                let y = out.data();
                if let Some(ga) = acc(self, grads, *a) {
                    // dx = y ⊙ (dy − ⟨dy, y⟩) per row
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(u, v)| u * v).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols().max(1);
                let y = out.data();
                if let Some(ga) = acc(self, grads, *a) {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = acc(self, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reduce { input, axis, kind, arg } => {
                let t = self.value(*input);
                let c = t.cols();
                if let Some(ga) = acc(self, grads, *input) {
                    match kind {
                        ReduceKind::Sum => {
                            for (k, d) in ga.iter_mut().enumerate() {
                                let o = if *axis == 1 { k / c } else { k % c };
                                *d += g[o];
                            }
                        }
                        ReduceKind::Max | ReduceKind::Min => {
                            for (o, &k) in arg.iter().enumerate() {
                                ga[k] += g[o];
                            }
                        }
                    }
                }
            }
            Op::Gather { input, index } => {
                if let Some(ga) = acc(self, grads, *input) {
                    for (&i, &v) in index.iter().zip(g) {
                        ga[i] += v;
                    }
                }
            }
            Op::Scatter { input, index } => {
                if let Some(ga) = acc(self, grads, *input) {
                    for (d, &i) in ga.iter_mut().zip(index) {
                        *d += g[i];
                    }
                }
            }
            Op::SparseLinear { input, taps } => {
                if let Some(ga) = acc(self, grads, *input) {
                    for &(o, i, w) in taps {
                        ga[i as usize] += w * g[o as usize];
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&id, &sz) in inputs.iter().zip(sizes) {
                    if let Some(gi) = acc(self, grads, id) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            add_into(&mut gi[o * sz * inner..(o + 1) * sz * inner], src);
                        }
                    }
                    offset += sz;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                geom,
            } => {
                let hw = geom.oh * geom.ow;
                let ckk = geom.c * geom.k * geom.k;
                if let Some(b) = bias {
                    if let Some(gb) = acc(self, grads, *b) {
                        for (d, row) in gb.iter_mut().zip(g.chunks(hw)) {
                            *d += row.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = acc(self, grads, *weight) {
                    // dW = dY · colsᵀ
                    gemm(geom.o, hw, ckk, g, (hw as isize, 1), cols, (1, hw as isize), 1.0, gw);
                }
                if self.rg(*input) {
                    // dcols = Wᵀ · dY, folded back onto the input
                    let wd = self.value(*weight).data();
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, geom.o, hw, wd, (1, ckk as isize), g, (hw as isize, 1), 0.0, &mut dcols);
                    if let Some(gx) = acc(self, grads, *input) {
                        col2im(&dcols, geom, gx);
                    }
                }
            }
            Op::MaxPool2 { input, arg } => {
                if let Some(ga) = acc(self, grads, *input) {
                    for (&k, &v) in arg.iter().zip(g) {
                        ga[k] += v;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
