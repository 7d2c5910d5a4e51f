//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! A [`Graph`] is the computation record: every op applied to at least one
//! tracked [`Var`] appends a node holding its inputs, its output and the data
//! its backward rule needs. Nodes are appended in execution order, so the
//! record is topologically sorted by construction and [`Graph::backward`]
//! is a single reverse sweep.
//!
//! A graph built with [`Graph::inference`] records nothing; intermediate
//! values are then freed as soon as their `Var`s are dropped.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{dim_err, validation_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Whether gradients flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|arc| (*arc).clone())
    }
}

#[derive(Clone, Debug)]
enum OpKind<T> {
    Leaf,
    MatMul { m: usize, k: usize, n: usize },
    Transpose { rows: usize, cols: usize },
    Reshape,
    Add,
    Mul,
    Scale(T),
    AddRowBias { c: usize },
    AddChannelBias { c: usize },
    Sum,
    Mean,
    Conv2d { geom: ConvGeom, cout: usize },
    Depthwise { geom: ConvGeom },
    Softmax { outer: usize, n: usize, inner: usize },
    LayerNorm { c: usize, eps: T },
    Gelu,
    Resize { c: usize, h: usize, w: usize, h2: usize, w2: usize },
    CrossEntropy { target: Arc<Vec<usize>>, k: usize, ignore: usize },
    SliceCols { rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { rows: usize },
    Concat0,
}

#[derive(Debug)]
struct Node<T> {
    kind: OpKind<T>,
    inputs: Vec<Var<T>>,
    value: Arc<Tensor<T>>,
}

/// Computation record with reverse-mode differentiation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Graph::backward`] call, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a tracked leaf. `None` when the
    /// leaf did not influence the loss.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.by_node.get(&id))
    }

    /// Like [`Gradients::get`] but materialises zeros for unreached leaves.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::from_parts(var.shape().to_vec(), vec![T::zero(); var.value.numel()]))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn expect_rank<T: Scalar>(op: &str, x: &Var<T>, rank: usize) -> Result<()> {
    if x.value.rank() != rank {
        return Err(dim_err!("{op}: expected rank {rank}, got shape {:?}", x.shape()));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// A recording graph for training and gradient checks.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A graph that never records; every `Var` it returns is untracked.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// A tracked leaf (requires grad) when recording, a constant otherwise.
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        self.leaf_shared(Arc::new(t))
    }

    /// Tracked leaf sharing storage with the caller (used for parameters).
    pub fn leaf_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { kind: OpKind::Leaf, inputs: Vec::new(), value: value.clone() });
        Var { id: Some(id), value }
    }

    /// An untracked value; no gradient is computed for it.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { id: None, value: Arc::new(t) }
    }

    fn record(&self, kind: OpKind<T>, inputs: Vec<Var<T>>, out: Tensor<T>) -> Var<T> {
        let value = Arc::new(out);
        if !self.recording || !inputs.iter().any(Var::is_tracked) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { kind, inputs, value: value.clone() });
        Var { id: Some(id), value }
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_rank("matmul", a, 2)?;
        expect_rank("matmul", b, 2)?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(dim_err!("matmul: inner dimensions differ for {:?} and {:?}", a.shape(), b.shape()));
        }
        let out = kernels::matmul(a.value.data(), b.value.data(), m, k, n);
        Ok(self.record(OpKind::MatMul { m, k, n }, vec![a.clone(), b.clone()], Tensor::from_parts(vec![m, n], out)))
    }

    pub fn transpose(&self, x: &Var<T>) -> Result<Var<T>> {
        expect_rank("transpose", x, 2)?;
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let out = kernels::transpose(x.value.data(), rows, cols);
        Ok(self.record(OpKind::Transpose { rows, cols }, vec![x.clone()], Tensor::from_parts(vec![cols, rows], out)))
    }

    pub fn reshape(&self, x: &Var<T>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let out = x.value.reshape(shape)?;
        Ok(self.record(OpKind::Reshape, vec![x.clone()], out))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let data = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| x + y).collect();
        Ok(self.record(OpKind::Add, vec![a.clone(), b.clone()], Tensor::from_parts(a.shape().to_vec(), data)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let data = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| x * y).collect();
        Ok(self.record(OpKind::Mul, vec![a.clone(), b.clone()], Tensor::from_parts(a.shape().to_vec(), data)))
    }

    pub fn scale(&self, x: &Var<T>, s: T) -> Var<T> {
        let out = x.value.map(|v| v * s);
        self.record(OpKind::Scale(s), vec![x.clone()], out)
    }

    /// `x[..., C] + b[C]`.
    pub fn add_row_bias(&self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_rank("add_row_bias", b, 1)?;
        let c = b.shape()[0];
        if x.value.rank() == 0 || *x.shape().last().unwrap() != c {
            return Err(dim_err!("add_row_bias: bias {:?} does not match last axis of {:?}", b.shape(), x.shape()));
        }
        let mut out = x.value.as_ref().clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b.value.data()) {
                *v += bv;
            }
        }
        Ok(self.record(OpKind::AddRowBias { c }, vec![x.clone(), b.clone()], out))
    }

    /// `x[C, ...] + b[C]`.
    pub fn add_channel_bias(&self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        expect_rank("add_channel_bias", b, 1)?;
        let c = b.shape()[0];
        if x.value.rank() == 0 || x.shape()[0] != c {
            return Err(dim_err!("add_channel_bias: bias {:?} does not match axis 0 of {:?}", b.shape(), x.shape()));
        }
        let mut out = x.value.as_ref().clone();
        let per = out.numel() / c;
        for (ch, plane) in out.data_mut().chunks_exact_mut(per).enumerate() {
            let bv = b.value.data()[ch];
            for v in plane {
                *v += bv;
            }
        }
        Ok(self.record(OpKind::AddChannelBias { c }, vec![x.clone(), b.clone()], out))
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        self.record(OpKind::Sum, vec![x.clone()], Tensor::scalar(x.value.sum()))
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let m = x.value.sum() / T::from_usize_lossy(x.value.numel());
        self.record(OpKind::Mean, vec![x.clone()], Tensor::scalar(m))
    }

    /// Zero-padded 2-D convolution of `x[Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, bias: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        expect_rank("conv2d", x, 3)?;
        expect_rank("conv2d", w, 4)?;
        let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let geom = conv_geom("conv2d", x.shape(), kh, kw, stride, pad)?;
        if wcin != geom.cin {
            return Err(dim_err!("conv2d: input {:?} has {} channels, kernel {:?} expects {wcin}", x.shape(), geom.cin, w.shape()));
        }
        if bias.shape() != [cout] {
            return Err(dim_err!("conv2d: bias {:?} does not match {cout} output channels", bias.shape()));
        }
        let out = kernels::conv2d(x.value.data(), w.value.data(), Some(bias.value.data()), cout, &geom);
        let shape = vec![cout, geom.out_h(), geom.out_w()];
        Ok(self.record(
            OpKind::Conv2d { geom, cout },
            vec![x.clone(), w.clone(), bias.clone()],
            Tensor::from_parts(shape, out),
        ))
    }

    /// Per-channel convolution of `x[C,H,W]` with `w[C,1,kh,kw]`.
    pub fn depthwise_conv2d(&self, x: &Var<T>, w: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        expect_rank("depthwise_conv2d", x, 3)?;
        expect_rank("depthwise_conv2d", w, 4)?;
        let (c, one, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let geom = conv_geom("depthwise_conv2d", x.shape(), kh, kw, stride, pad)?;
        if c != geom.cin || one != 1 {
            return Err(dim_err!(
                "depthwise_conv2d: kernel {:?} does not provide one filter per channel of {:?}",
                w.shape(),
                x.shape()
            ));
        }
        let out = kernels::depthwise_conv2d(x.value.data(), w.value.data(), &geom);
        let shape = vec![c, geom.out_h(), geom.out_w()];
        Ok(self.record(OpKind::Depthwise { geom }, vec![x.clone(), w.clone()], Tensor::from_parts(shape, out)))
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        if axis >= x.value.rank() {
            return Err(Error::Index(format!("softmax axis {axis} out of range for shape {:?}", x.shape())));
        }
        let (outer, n, inner) = kernels::axis_split(x.shape(), axis);
        let out = kernels::softmax(x.value.data(), outer, n, inner);
        Ok(self.record(
            OpKind::Softmax { outer, n, inner },
            vec![x.clone()],
            Tensor::from_parts(x.shape().to_vec(), out),
        ))
    }

    /// Normalises over the last axis, then applies a per-channel affine map.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let c = *x.shape().last().ok_or_else(|| dim_err!("layer_norm on a rank-0 tensor"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(dim_err!(
                "layer_norm: gamma {:?} / beta {:?} must both be [{c}] for input {:?}",
                gamma.shape(),
                beta.shape(),
                x.shape()
            ));
        }
        let out = kernels::layer_norm(x.value.data(), gamma.value.data(), beta.value.data(), c, eps);
        Ok(self.record(
            OpKind::LayerNorm { c, eps },
            vec![x.clone(), gamma.clone(), beta.clone()],
            Tensor::from_parts(x.shape().to_vec(), out),
        ))
    }

    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        self.record(OpKind::Gelu, vec![x.clone()], x.value.map(kernels::gelu))
    }

    /// Bilinear resize of `x[C,H,W]` to `[C,h2,w2]`, align-corners=false.
    pub fn bilinear_resize(&self, x: &Var<T>, h2: usize, w2: usize) -> Result<Var<T>> {
        expect_rank("bilinear_resize", x, 3)?;
        if h2 == 0 || w2 == 0 {
            return Err(dim_err!("bilinear_resize: target size {h2}x{w2} must be positive"));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out = kernels::bilinear_resize(x.value.data(), c, h, w, h2, w2);
        Ok(self.record(
            OpKind::Resize { c, h, w, h2, w2 },
            vec![x.clone()],
            Tensor::from_parts(vec![c, h2, w2], out),
        ))
    }

    /// Mean cross-entropy of `logits[K,H,W]` against a class-index map of
    /// `H·W` entries; pixels equal to `ignore_index` are skipped.
    pub fn cross_entropy(&self, logits: &Var<T>, target: &[usize], ignore_index: usize) -> Result<Var<T>> {
        expect_rank("cross_entropy", logits, 3)?;
        let k = logits.shape()[0];
        let p = logits.shape()[1] * logits.shape()[2];
        if target.len() != p {
            return Err(dim_err!("cross_entropy: target has {} pixels, logits {:?}", target.len(), logits.shape()));
        }
        if let Some((px, &t)) = target.iter().enumerate().find(|(_, &t)| t != ignore_index && t >= k) {
            return Err(validation_err!("cross_entropy: class {t} at pixel {px} outside [0,{k})"));
        }
        let (loss, _) = kernels::cross_entropy(logits.value.data(), target, k, ignore_index);
        Ok(self.record(
            OpKind::CrossEntropy { target: Arc::new(target.to_vec()), k, ignore: ignore_index },
            vec![logits.clone()],
            Tensor::scalar(loss),
        ))
    }

    /// Columns `[start, start+len)` of a `[rows, cols]` matrix.
    pub fn slice_cols(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        expect_rank("slice_cols", x, 2)?;
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if len == 0 || start + len > cols {
            return Err(Error::Index(format!("slice_cols: [{start},{}) outside {cols} columns", start + len)));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.value.data()[r * cols + start..r * cols + start + len]);
        }
        Ok(self.record(
            OpKind::SliceCols { rows, cols, start, len },
            vec![x.clone()],
            Tensor::from_parts(vec![rows, len], out),
        ))
    }

    /// Joins `[rows, c_i]` matrices side by side.
    pub fn concat_cols(&self, parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| dim_err!("concat_cols of nothing"))?;
        expect_rank("concat_cols", first, 2)?;
        let rows = first.shape()[0];
        for p in parts {
            expect_rank("concat_cols", p, 2)?;
            if p.shape()[0] != rows {
                return Err(dim_err!("concat_cols: row counts {:?} vs {:?}", first.shape(), p.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.shape()[1];
                out.extend_from_slice(&p.value.data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.record(OpKind::ConcatCols { rows }, parts.to_vec(), Tensor::from_parts(vec![rows, total], out)))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat0(&self, parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| dim_err!("concat0 of nothing"))?;
        if first.value.rank() == 0 {
            return Err(dim_err!("concat0 on rank-0 tensors"));
        }
        let tail = &first.shape()[1..];
        for p in parts {
            if p.value.rank() == 0 || &p.shape()[1..] != tail {
                return Err(dim_err!("concat0: shapes {:?} and {:?} disagree", first.shape(), p.shape()));
            }
        }
        let lead: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let data = parts.iter().flat_map(|p| p.value.data().iter().copied()).collect();
        Ok(self.record(OpKind::Concat0, parts.to_vec(), Tensor::from_parts(shape, data)))
    }

    /// Propagates gradients from a scalar `loss` to every tracked leaf, then
    /// clears the record.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(validation_err!("backward needs a scalar loss, got shape {:?}", loss.shape()));
        }
        let Some(root) = loss.id else {
            return Ok(Gradients::default());
        };
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let inputs = &node.inputs;
            let val = |i: usize| inputs[i].value.data();
            let mut emit = |i: usize, d: Vec<T>| {
                if let Some(id) = inputs[i].id {
                    accumulate(&mut grads[id], d);
                }
            };
            match &node.kind {
                OpKind::Leaf => {
                    out.by_node.insert(idx, Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                OpKind::MatMul { m, k, n } => {
                    if inputs[0].is_tracked() {
                        emit(0, kernels::matmul_nt(&g, val(1), *m, *n, *k));
                    }
                    if inputs[1].is_tracked() {
                        emit(1, kernels::matmul_tn(val(0), &g, *m, *k, *n));
                    }
                }
                OpKind::Transpose { rows, cols } => emit(0, kernels::transpose(&g, *cols, *rows)),
                OpKind::Reshape => emit(0, g),
                OpKind::Add => {
                    emit(0, g.clone());
                    emit(1, g);
                }
                OpKind::Mul => {
                    emit(0, g.iter().zip(val(1)).map(|(&d, &b)| d * b).collect());
                    emit(1, g.iter().zip(val(0)).map(|(&d, &a)| d * a).collect());
                }
                OpKind::Scale(s) => emit(0, g.iter().map(|&d| d * *s).collect()),
                OpKind::AddRowBias { c } => {
                    let mut db = vec![T::zero(); *c];
                    for row in g.chunks_exact(*c) {
                        for (acc, &d) in db.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    emit(1, db);
                    emit(0, g);
                }
                OpKind::AddChannelBias { c } => {
                    let per = g.len() / c;
                    let db = g.chunks_exact(per).map(|p| p.iter().copied().sum()).collect();
                    emit(1, db);
                    emit(0, g);
                }
                OpKind::Sum => emit(0, vec![g[0]; inputs[0].value.numel()]),
                OpKind::Mean => {
                    let n = inputs[0].value.numel();
                    emit(0, vec![g[0] / T::from_usize_lossy(n); n]);
                }
                OpKind::Conv2d { geom, cout } => {
                    let (dx, dw, db) = kernels::conv2d_backward(val(0), val(1), &g, *cout, geom);
                    emit(0, dx);
                    emit(1, dw);
                    emit(2, db);
                }
                OpKind::Depthwise { geom } => {
                    let (dx, dw) = kernels::depthwise_conv2d_backward(val(0), val(1), &g, geom);
                    emit(0, dx);
                    emit(1, dw);
                }
                OpKind::Softmax { outer, n, inner } => {
                    emit(0, kernels::softmax_backward(node.value.data(), &g, *outer, *n, *inner));
                }
                OpKind::LayerNorm { c, eps } => {
                    let (dx, dgamma, dbeta) = kernels::layer_norm_backward(val(0), val(1), &g, *c, *eps);
                    emit(0, dx);
                    emit(1, dgamma);
                    emit(2, dbeta);
                }
                OpKind::Gelu => emit(0, g.iter().zip(val(0)).map(|(&d, &x)| d * kernels::gelu_grad(x)).collect()),
                OpKind::Resize { c, h, w, h2, w2 } => {
                    emit(0, kernels::bilinear_resize_backward(&g, *c, *h, *w, *h2, *w2));
                }
                OpKind::CrossEntropy { target, k, ignore } => {
                    emit(0, kernels::cross_entropy_backward(val(0), target, *k, *ignore, g[0]));
                }
                OpKind::SliceCols { rows, cols, start, len } => {
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..*rows {
                        dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    emit(0, dx);
                }
                OpKind::ConcatCols { rows } => {
                    let total = g.len() / rows;
                    let mut offset = 0;
                    for i in 0..inputs.len() {
                        let c = inputs[i].shape()[1];
                        if inputs[i].is_tracked() {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..*rows {
                                d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            emit(i, d);
                        }
                        offset += c;
                    }
                }
                OpKind::Concat0 => {
                    let mut offset = 0;
                    for i in 0..inputs.len() {
                        let n = inputs[i].value.numel();
                        if inputs[i].is_tracked() {
                            emit(i, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, d: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        None => *slot = Some(d),
    }
}

fn conv_geom(op: &str, x: &[usize], kh: usize, kw: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(dim_err!("{op}: stride must be at least 1"));
    }
    let (cin, h, w) = (x[0], x[1], x[2]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(dim_err!("{op}: kernel {kh}x{kw} larger than padded input {}x{} (pad {pad})", h + 2 * pad, w + 2 * pad));
    }
    Ok(ConvGeom { cin, h, w, kh, kw, stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones_and_square_gives_double() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = g.sum(&x);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.is_empty(), "record cleared after backward");

        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(&x, &x).unwrap();
        let loss = g.sum(&sq);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![2]).unwrap());
        assert!(matches!(g.backward(&x), Err(Error::Validation(_))));
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::ones(vec![2, 2]).unwrap());
        let y = g.matmul(&x, &x).unwrap();
        assert!(!y.is_tracked());
        assert!(g.is_empty());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![4, 2]).unwrap());
        let msg = g.matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn shared_input_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let y = g.add(&x, &x).unwrap();
        let z = g.scale(&y, 3.0);
        let loss = g.sum(&z);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn softmax_invalid_axis_is_index_error() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![2, 2]).unwrap());
        assert!(matches!(g.softmax(&x, 2), Err(Error::Index(_))));
    }
}
