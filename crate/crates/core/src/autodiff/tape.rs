//! The tape: eager forward evaluation with recorded backward closures.
//!
//! Every operation validates shapes, computes its value immediately, and
//! pushes a node holding a boxed backward implementation. [`Tape::backward`]
//! then walks the nodes in reverse, which is a valid topological order because
//! inputs always precede outputs. Gradients are allocated lazily, so paths the
//! loss never touched cost nothing and stay `None`.

use thiserror::Error;

use super::scalar::{sigmoid, softplus, Real};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(super) u32);

impl NodeId {
    pub(super) fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: invalid plan: {detail}")]
    InvalidPlan { op: &'static str, detail: String },
}

pub(super) fn shape_err(op: &'static str, detail: impl Into<String>) -> TapeError {
    TapeError::ShapeMismatch { op, detail: detail.into() }
}

pub(super) fn plan_err(op: &'static str, detail: impl Into<String>) -> TapeError {
    TapeError::InvalidPlan { op, detail: detail.into() }
}

/// Backward rule for one recorded operation.
///
/// `out` is the node this op produced and `out_grad` the loss gradient with
/// respect to it; the implementation accumulates into the grads of its inputs.
pub(super) trait TapeOp<T: Real>: Send + Sync {
    fn backward(&self, tape: &Tape<T>, out: NodeId, out_grad: &Tensor<T>, grads: &mut Gradients<T>);
}

enum NodeKind<T: Real> {
    Leaf { name: Option<String> },
    Constant,
    Op(Box<dyn TapeOp<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    kind: NodeKind<T>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.slots[id.index()].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.slots[id.index()].take()
    }

    /// Gradient buffer for `id`, allocated as zeros on first touch.
    pub(super) fn accumulate(&mut self, id: NodeId, shape: &[usize]) -> &mut Tensor<T> {
        let slot = &mut self.slots[id.index()];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        slot.as_mut().expect("just filled")
    }
}

/// Recording tape. See module docs.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.index()].value
    }

    /// Named leaves in recording order (parameters and trainable variables).
    pub fn named_leaves(&self) -> impl Iterator<Item = (NodeId, &str)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.kind {
            NodeKind::Leaf { name: Some(name) } => Some((NodeId(i as u32), name.as_str())),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor<T>, kind: NodeKind<T>) -> NodeId {
        let id = NodeId(u32::try_from(self.nodes.len()).expect("tape too long"));
        self.nodes.push(Node { value, kind });
        id
    }

    pub(super) fn push_op(&mut self, value: Tensor<T>, op: impl TapeOp<T> + 'static) -> NodeId {
        self.push(value, NodeKind::Op(Box::new(op)))
    }

    /// Differentiable input. Named leaves can be looked up after `backward`.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        self.push(value, NodeKind::Leaf { name: Some(name.into()) })
    }

    /// Differentiable input without a name (gradient fetched by id).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, NodeKind::Leaf { name: None })
    }

    /// Non-differentiable value (targets, fixed geometry, weights tables).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, NodeKind::Constant)
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// leaves the loss never influenced have no entry.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TapeError> {
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(TapeError::NonScalarLoss { shape: loss_val.shape().to_vec() });
        }
        let mut grads = Gradients { slots: (0..self.nodes.len()).map(|_| None).collect() };
        grads.slots[loss.index()] = Some(Tensor::full(loss_val.shape(), T::one()));
        for i in (0..self.nodes.len()).rev() {
            if let NodeKind::Op(op) = &self.nodes[i].kind {
                // An op node's gradient is final once we reach it (consumers
                // all have larger indices), so it can be consumed here.
                if let Some(g) = grads.slots[i].take() {
                    op.backward(self, NodeId(i as u32), &g, &mut grads);
                }
            }
        }
        Ok(grads)
    }

    // ---- dense linear algebra ----------------------------------------------

    /// `[n,k] x [k,m] -> [n,m]` matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(&[n, m]);
        matmul_acc(av.data(), bv.data(), out.data_mut(), n, k, m);
        Ok(self.push_op(out, MatMul { a, b }))
    }

    /// Add a `[m]` bias row to every row of `[n,m]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(shape_err(
                "add_bias",
                format!("x {:?} bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let bdata = bv.data().to_vec();
        let mut out = xv.clone();
        for row in 0..out.rows() {
            let r = out.row_mut(row);
            for (o, &b) in r.iter_mut().zip(&bdata) {
                *o += b;
            }
        }
        Ok(self.push_op(out, AddBias { x, bias }))
    }

    /// Concatenate rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != n {
                return Err(shape_err(
                    "concat_cols",
                    format!("all inputs need {} rows, got {:?}", n, v.shape()),
                ));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        for row in 0..n {
            let orow = out.row_mut(row);
            let mut at = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                orow[at..at + w].copy_from_slice(self.value(p).row(row));
                at += w;
            }
        }
        Ok(self.push_op(out, Concat { parts: parts.to_vec(), widths }))
    }

    // ---- elementwise --------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(a, b, BinKind::Mul)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: BinKind) -> Result<NodeId, TapeError> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(shape_err("binary", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
            })
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        Ok(self.push_op(out, Binary { a, b, kind }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Square)
    }

    fn unary(&mut self, x: NodeId, kind: UnaryKind) -> NodeId {
        let out = self.value(x).map(|v| match kind {
            UnaryKind::Relu => v.maximum(T::zero()),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Square => v * v,
        });
        self.push_op(out, Unary { x, kind })
    }

    /// `a * x + b` with f64 constants (broadcast over all elements).
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let (ta, tb) = (T::from_f64(a), T::from_f64(b));
        let out = self.value(x).map(|v| ta * v + tb);
        self.push_op(out, Affine { x, a: ta })
    }

    /// Mean over all elements, as a `[1,1]` tensor.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.len().max(1);
        let mut acc = T::zero();
        for &v in xv.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc / T::from_f64(n as f64));
        self.push_op(out, MeanAll { x, n })
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn column_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.cols() {
            return Err(shape_err(
                "column_slice",
                format!("cols {}..{} of {:?}", start, start + len, xv.shape()),
            ));
        }
        let n = xv.rows();
        let mut out = Tensor::zeros(&[n, len]);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push_op(out, ColumnSlice { x, start, len }))
    }

    /// Reinterpret a `[C,H,W]` feature image as `[H*W, C]` rows (row-major
    /// pixels), the layout every gather/matmul op downstream expects.
    pub fn chw_to_rows(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(shape_err("chw_to_rows", format!("need [C,H,W], got {:?}", xv.shape())));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(&[h * w, c]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for ci in 0..c {
                for p in 0..h * w {
                    dst[p * c + ci] = src[ci * h * w + p];
                }
            }
        }
        Ok(self.push_op(out, ChwToRows { x, c, hw: h * w }))
    }
}

// ---- kernels used by forward and backward passes ---------------------------

/// `out += a x b` for row-major slices (the i-k-j loop order keeps the inner
/// loop a contiguous axpy, which the autovectorizer handles well).
pub(super) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

pub(super) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(super) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

// ---- backward implementations ----------------------------------------------

struct MatMul {
    a: NodeId,
    b: NodeId,
}

impl<T: Real> TapeOp<T> for MatMul {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let av = tape.value(self.a);
        let bv = tape.value(self.b);
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        {
            // dA = g x B^T: dA[i,kk] = <g[i,:], B[kk,:]>
            let ga = grads.accumulate(self.a, av.shape());
            for i in 0..n {
                let grow = &g.data()[i * m..(i + 1) * m];
                let garow = &mut ga.data_mut()[i * k..(i + 1) * k];
                for (kk, gav) in garow.iter_mut().enumerate() {
                    *gav += dot(grow, &bv.data()[kk * m..(kk + 1) * m]);
                }
            }
        }
        {
            // dB = A^T x g: dB[kk,:] += A[i,kk] * g[i,:]
            let gb = grads.accumulate(self.b, bv.shape());
            for i in 0..n {
                let grow = &g.data()[i * m..(i + 1) * m];
                for kk in 0..k {
                    let aik = av.at(i, kk);
                    axpy(&mut gb.data_mut()[kk * m..(kk + 1) * m], aik, grow);
                }
            }
        }
    }
}

struct AddBias {
    x: NodeId,
    bias: NodeId,
}

impl<T: Real> TapeOp<T> for AddBias {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let xshape = tape.value(self.x).shape().to_vec();
        grads.accumulate(self.x, &xshape).add_assign(g);
        let bshape = tape.value(self.bias).shape().to_vec();
        let gb = grads.accumulate(self.bias, &bshape);
        for r in 0..g.rows() {
            for (b, &gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                *b += gv;
            }
        }
    }
}

struct Concat {
    parts: Vec<NodeId>,
    widths: Vec<usize>,
}

impl<T: Real> TapeOp<T> for Concat {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let n = g.rows();
        let mut at = 0;
        for (&p, &w) in self.parts.iter().zip(&self.widths) {
            let pshape = tape.value(p).shape().to_vec();
            let gp = grads.accumulate(p, &pshape);
            for r in 0..n {
                let src = &g.row(r)[at..at + w];
                for (d, &s) in gp.row_mut(r).iter_mut().zip(src) {
                    *d += s;
                }
            }
            at += w;
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    a: NodeId,
    b: NodeId,
    kind: BinKind,
}

impl<T: Real> TapeOp<T> for Binary {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let shape = g.shape().to_vec();
        match self.kind {
            BinKind::Add => {
                grads.accumulate(self.a, &shape).add_assign(g);
                grads.accumulate(self.b, &shape).add_assign(g);
            }
            BinKind::Sub => {
                grads.accumulate(self.a, &shape).add_assign(g);
                let gb = grads.accumulate(self.b, &shape);
                for (d, &s) in gb.data_mut().iter_mut().zip(g.data()) {
                    *d -= s;
                }
            }
            BinKind::Mul => {
                {
                    let bv = tape.value(self.b);
                    let ga = grads.accumulate(self.a, &shape);
                    for ((d, &gv), &bvv) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gv * bvv;
                    }
                }
                let av = tape.value(self.a);
                let gb = grads.accumulate(self.b, &shape);
                for ((d, &gv), &avv) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gv * avv;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Square,
}

struct Unary {
    x: NodeId,
    kind: UnaryKind,
}

impl<T: Real> TapeOp<T> for Unary {
    fn backward(&self, tape: &Tape<T>, out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let xv = tape.value(self.x);
        let yv = tape.value(out);
        let shape = xv.shape().to_vec();
        let gx = grads.accumulate(self.x, &shape);
        let one = T::one();
        let two = T::from_f64(2.0);
        for i in 0..g.len() {
            let gv = g.data()[i];
            let local = match self.kind {
                UnaryKind::Relu => {
                    if xv.data()[i] > T::zero() {
                        one
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Sigmoid => {
                    let y = yv.data()[i];
                    y * (one - y)
                }
                UnaryKind::Tanh => {
                    let y = yv.data()[i];
                    one - y * y
                }
                UnaryKind::Softplus => sigmoid(xv.data()[i]),
                UnaryKind::Square => two * xv.data()[i],
            };
            gx.data_mut()[i] += gv * local;
        }
    }
}

struct Affine<T> {
    x: NodeId,
    a: T,
}

impl<T: Real> TapeOp<T> for Affine<T> {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let shape = tape.value(self.x).shape().to_vec();
        let gx = grads.accumulate(self.x, &shape);
        for (d, &s) in gx.data_mut().iter_mut().zip(g.data()) {
            *d += self.a * s;
        }
    }
}

struct MeanAll {
    x: NodeId,
    n: usize,
}

impl<T: Real> TapeOp<T> for MeanAll {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let shape = tape.value(self.x).shape().to_vec();
        let per = g.item() / T::from_f64(self.n as f64);
        let gx = grads.accumulate(self.x, &shape);
        for d in gx.data_mut() {
            *d += per;
        }
    }
}

struct ColumnSlice {
    x: NodeId,
    start: usize,
    len: usize,
}

impl<T: Real> TapeOp<T> for ColumnSlice {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let shape = tape.value(self.x).shape().to_vec();
        let gx = grads.accumulate(self.x, &shape);
        for r in 0..g.rows() {
            let dst = &mut gx.row_mut(r)[self.start..self.start + self.len];
            for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                *d += s;
            }
        }
    }
}

struct ChwToRows {
    x: NodeId,
    c: usize,
    hw: usize,
}

impl<T: Real> TapeOp<T> for ChwToRows {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let shape = tape.value(self.x).shape().to_vec();
        let gx = grads.accumulate(self.x, &shape);
        let dst = gx.data_mut();
        let src = g.data();
        for ci in 0..self.c {
            for p in 0..self.hw {
                dst[ci * self.hw + p] += src[p * self.c + ci];
            }
        }
    }
}
