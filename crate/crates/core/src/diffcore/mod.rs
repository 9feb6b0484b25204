//! Minimal dense-array engine with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`DiffArray`] values and
//! replays the records backward to populate gradients on the leaves. The
//! tape is append-only; node handles are plain indices, so the recorded
//! graph is always in topological order and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! The engine is deliberately small: dense f64 arrays, first-order
//! gradients only, one tape per thread.

mod attention;
pub mod fdcheck;
mod kernels;

pub use attention::{multi_head_cross_attention, AttentionNodes};

use crate::error::{Error, Result};

pub(crate) use kernels::{dot, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Dense n-dimensional f64 array, row-major, optionally carrying a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl DiffArray {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Self { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, values: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], values: vec![v], requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// (rows, cols) of a 2-d array.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!("expected 2-d array, got {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.values[i * c..(i + 1) * c]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// a[m×k] · b[n×k]ᵀ — keys stay row-major in attention scores.
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    MulRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { a: NodeId },
    /// Even columns become sin, odd columns cos of the input.
    SinCosInterleaved { a: NodeId },
    Sqrt { a: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    GatherRows { a: NodeId, idx: Vec<usize> },
    SumAll { a: NodeId },
}

struct Node {
    value: DiffArray,
    op: Op,
}

/// Records operations for one forward pass; replaying it backward fills in
/// gradients. Confined to a single thread.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    allocated: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: false, allocated: 0 }
    }

    /// Enable the NaN/Inf scan after every recorded operation.
    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    /// Total f64 elements allocated for node values so far. Used by tests to
    /// bound the working set of chunked decoding.
    pub fn allocated_values(&self) -> usize {
        self.allocated
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DiffArray {
        &self.nodes[id.0].value
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.values()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn leaf_grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, value: DiffArray, op: Op, context: &str) -> Result<NodeId> {
        if self.checked {
            value.check_finite(context)?;
        }
        self.allocated += value.len();
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    /// Insert an array as a differentiable leaf.
    pub fn leaf(&mut self, mut array: DiffArray) -> NodeId {
        array.requires_grad = true;
        array.grad = None;
        self.allocated += array.len();
        self.nodes.push(Node { value: array, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an array as a non-differentiable constant.
    pub fn constant(&mut self, mut array: DiffArray) -> NodeId {
        array.requires_grad = false;
        array.grad = None;
        self.allocated += array.len();
        self.nodes.push(Node { value: array, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes[id.0].value.dims2()
    }

    /// C[m×n] = A[m×k] · B[k×n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims differ: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn_acc(m, ka, n, self.values(a), self.values(b), &mut out);
        let mut v = DiffArray::from_vec(vec![m, n], out)?;
        v.requires_grad = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMul { a, b }, "matmul")
    }

    /// C[m×n] = A[m×k] · B[n×k]ᵀ
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a)?;
        let (n, kb) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt inner dims differ: {m}x{ka} vs {n}x{kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(m, ka, n, self.values(a), self.values(b), &mut out);
        let mut v = DiffArray::from_vec(vec![m, n], out)?;
        v.requires_grad = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMulNT { a, b }, "matmul_nt")
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        context: &str,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{context}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out: Vec<f64> = va.values().iter().zip(vb.values()).map(|(&x, &y)| f(x, y)).collect();
        let mut v = DiffArray::from_vec(va.shape().to_vec(), out)?;
        v.requires_grad = self.requires(a) || self.requires(b);
        self.push(v, op, context)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    fn row_broadcast(
        &mut self,
        a: NodeId,
        row: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        context: &str,
    ) -> Result<NodeId> {
        let (m, n) = self.dims2(a)?;
        let rv = &self.nodes[row.0].value;
        if rv.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{context}: row of {} against {m}x{n}",
                rv.len()
            )));
        }
        let av = self.values(a);
        let rvals = self.nodes[row.0].value.values();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(f(av[i * n + j], rvals[j]));
            }
        }
        let mut v = DiffArray::from_vec(vec![m, n], out)?;
        v.requires_grad = self.requires(a) || self.requires(row);
        self.push(v, op, context)
    }

    /// Broadcast-add a length-n row to every row of a[m×n].
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast(a, row, |x, y| x + y, Op::AddRow { a, row }, "add_row")
    }

    /// Broadcast-multiply every row of a[m×n] by a length-n row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast(a, row, |x, y| x * y, Op::MulRow { a, row }, "mul_row")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out: Vec<f64> = va.values().iter().map(|&x| x * c).collect();
        let mut v = DiffArray::from_vec(va.shape().to_vec(), out)?;
        v.requires_grad = self.requires(a);
        self.push(v, Op::Scale { a, c }, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out: Vec<f64> = va.values().iter().map(|&x| x + c).collect();
        let mut v = DiffArray::from_vec(va.shape().to_vec(), out)?;
        v.requires_grad = self.requires(a);
        self.push(v, Op::AddScalar { a }, "add_scalar")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a)?;
        if n == 0 {
            return Err(Error::ShapeMismatch("softmax over empty rows".into()));
        }
        let av = self.values(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let mut v = DiffArray::from_vec(vec![m, n], out)?;
        v.requires_grad = self.requires(a);
        self.push(v, Op::SoftmaxRows { a }, "softmax_rows")
    }

    /// Row-wise standardization followed by an affine transform.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::InvalidConfig("layer_norm eps must be > 0".into()));
        }
        let (m, d) = self.dims2(x)?;
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if gv.len() != d || bv.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm gain/bias of {}/{} against width {d}",
                gv.len(),
                bv.len()
            )));
        }
        let xv = self.values(x);
        let gvals = self.nodes[gain.0].value.values();
        let bvals = self.nodes[bias.0].value.values();
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv * gvals[j] + bvals[j];
            }
        }
        let mut v = DiffArray::from_vec(vec![m, d], out)?;
        v.requires_grad = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, "layer_norm")
    }

    /// GELU in the tanh form, so the derivative is exact.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out: Vec<f64> = va.values().iter().map(|&x| gelu_fwd(x)).collect();
        let mut v = DiffArray::from_vec(va.shape().to_vec(), out)?;
        v.requires_grad = self.requires(a);
        self.push(v, Op::Gelu { a }, "gelu")
    }

    /// Apply sin to even columns and cos to odd columns of a[m×n], n even.
    pub fn sin_cos_interleaved(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a)?;
        if n % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "sin_cos_interleaved needs an even column count, got {n}"
            )));
        }
        let av = self.values(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let x = av[i * n + j];
                out[i * n + j] = if j % 2 == 0 { x.sin() } else { x.cos() };
            }
        }
        let mut v = DiffArray::from_vec(vec![m, n], out)?;
        v.requires_grad = self.requires(a);
        self.push(v, Op::SinCosInterleaved { a }, "sin_cos_interleaved")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let out: Vec<f64> = va.values().iter().map(|&x| x.sqrt()).collect();
        let mut v = DiffArray::from_vec(va.shape().to_vec(), out)?;
        v.requires_grad = self.requires(a);
        self.push(v, Op::Sqrt { a }, "sqrt")
    }

    /// Concatenate 2-d arrays with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_cols of zero parts".into()));
        }
        let (m, _) = self.dims2(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.dims2(p)?;
            if mp != m {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols row counts differ: {m} vs {mp}"
                )));
            }
            widths.push(np);
            total += np;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.values(p);
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let mut v = DiffArray::from_vec(vec![m, total], out)?;
        v.requires_grad = parts.iter().any(|&p| self.requires(p));
        self.push(v, Op::ConcatCols { parts: parts.to_vec() }, "concat_cols")
    }

    /// Columns [start, start+len) of a 2-d array.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a)?;
        if start + len > n {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols [{start}, {}) out of width {n}",
                start + len
            )));
        }
        let av = self.values(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let mut v = DiffArray::from_vec(vec![m, len], out)?;
        v.requires_grad = self.requires(a);
        self.push(v, Op::SliceCols { a, start, len }, "slice_cols")
    }

    /// Select rows of a 2-d array; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims2(a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::ShapeMismatch(format!("gather_rows index {bad} out of {m} rows")));
        }
        let av = self.values(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let mut v = DiffArray::from_vec(vec![idx.len(), n], out)?;
        v.requires_grad = self.requires(a);
        self.push(v, Op::GatherRows { a, idx: idx.to_vec() }, "gather_rows")
    }

    /// Sum of all elements, as a length-1 array.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a.0].value.values().iter().sum();
        let mut v = DiffArray::scalar(s);
        v.requires_grad = self.requires(a);
        self.push(v, Op::SumAll { a }, "sum_all")
    }

    /// Reverse sweep from a scalar node. Populates `grad` on every
    /// `requires_grad` leaf; leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NotScalar(self.nodes[loss.0].value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else {
                if let Op::Leaf = self.nodes[id].op {
                    if self.nodes[id].value.requires_grad {
                        let len = self.nodes[id].value.len();
                        self.nodes[id].value.grad = Some(vec![0.0; len]);
                    }
                }
                continue;
            };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            // Split borrows: node values are read-only during the sweep.
            let (op, value) = {
                let node = &self.nodes[id];
                (&node.op, &node.value)
            };
            match *op {
                Op::Leaf => {
                    // Written below, outside the immutable borrow.
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.nodes[a.0].value.dims2()?;
                    let (_, nn) = self.nodes[b.0].value.dims2()?;
                    if self.requires(a) {
                        let bvals = self.nodes[b.0].value.values();
                        let buf = grad_buf(&mut grads, a.0, m * k);
                        gemm_nt_acc(m, nn, k, &g, bvals, buf);
                    }
                    if self.requires(b) {
                        let avals = self.nodes[a.0].value.values();
                        let buf = grad_buf(&mut grads, b.0, k * nn);
                        gemm_tn_acc(k, m, nn, avals, &g, buf);
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = self.nodes[a.0].value.dims2()?;
                    let (nn, _) = self.nodes[b.0].value.dims2()?;
                    if self.requires(a) {
                        let bvals = self.nodes[b.0].value.values();
                        let buf = grad_buf(&mut grads, a.0, m * k);
                        gemm_nn_acc(m, nn, k, &g, bvals, buf);
                    }
                    if self.requires(b) {
                        let avals = self.nodes[a.0].value.values();
                        let buf = grad_buf(&mut grads, b.0, nn * k);
                        gemm_tn_acc(nn, m, k, &g, avals, buf);
                    }
                }
                Op::Add { a, b } => {
                    for input in [a, b] {
                        if self.requires(input) {
                            let buf = grad_buf(&mut grads, input.0, g.len());
                            for (o, &gi) in buf.iter_mut().zip(&g) {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if self.requires(a) {
                        let buf = grad_buf(&mut grads, a.0, g.len());
                        for (o, &gi) in buf.iter_mut().zip(&g) {
                            *o += gi;
                        }
                    }
                    if self.requires(b) {
                        let buf = grad_buf(&mut grads, b.0, g.len());
                        for (o, &gi) in buf.iter_mut().zip(&g) {
                            *o -= gi;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(a) {
                        let bv = self.nodes[b.0].value.values();
                        let buf = grad_buf(&mut grads, a.0, g.len());
                        for ((o, &gi), &x) in buf.iter_mut().zip(&g).zip(bv) {
                            *o += gi * x;
                        }
                    }
                    if self.requires(b) {
                        let av = self.nodes[a.0].value.values();
                        let buf = grad_buf(&mut grads, b.0, g.len());
                        for ((o, &gi), &x) in buf.iter_mut().zip(&g).zip(av) {
                            *o += gi * x;
                        }
                    }
                }
                Op::AddRow { a, row } => {
                    let (m, nn) = self.nodes[a.0].value.dims2()?;
                    if self.requires(a) {
                        let buf = grad_buf(&mut grads, a.0, g.len());
                        for (o, &gi) in buf.iter_mut().zip(&g) {
                            *o += gi;
                        }
                    }
                    if self.requires(row) {
                        let buf = grad_buf(&mut grads, row.0, nn);
                        for i in 0..m {
                            for j in 0..nn {
                                buf[j] += g[i * nn + j];
                            }
                        }
                    }
                }
                Op::MulRow { a, row } => {
                    let (m, nn) = self.nodes[a.0].value.dims2()?;
                    if self.requires(a) {
                        let rv = self.nodes[row.0].value.values();
                        let buf = grad_buf(&mut grads, a.0, g.len());
                        for i in 0..m {
                            for j in 0..nn {
                                buf[i * nn + j] += g[i * nn + j] * rv[j];
                            }
                        }
                    }
                    if self.requires(row) {
                        let av = self.nodes[a.0].value.values();
                        let buf = grad_buf(&mut grads, row.0, nn);
                        for i in 0..m {
                            for j in 0..nn {
                                buf[j] += g[i * nn + j] * av[i * nn + j];
                            }
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if self.requires(a) {
                        let buf = grad_buf(&mut grads, a.0, g.len());
                        for (o, &gi) in buf.iter_mut().zip(&g) {
                            *o += gi * c;
                        }
                    }
                }
                Op::AddScalar { a } => {
                    if self.requires(a) {
                        let buf = grad_buf(&mut grads, a.0, g.len());
                        for (o, &gi) in buf.iter_mut().zip(&g) {
                            *o += gi;
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.requires(a) {
                        let (m, nn) = value.dims2()?;
                        let y = value.values().to_vec();
                        let buf = grad_buf(&mut grads, a.0, m * nn);
                        for i in 0..m {
                            let yr = &y[i * nn..(i + 1) * nn];
                            let gr = &g[i * nn..(i + 1) * nn];
                            let s: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                            for j in 0..nn {
                                buf[i * nn + j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (m, d) = self.nodes[x.0].value.dims2()?;
                    let xv = self.nodes[x.0].value.values().to_vec();
                    let gv = self.nodes[gain.0].value.values().to_vec();
                    let df = d as f64;
                    // Recompute per-row statistics rather than storing them.
                    let mut stats = Vec::with_capacity(m);
                    for i in 0..m {
                        let row = &xv[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / df;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        stats.push((mean, 1.0 / (var + eps).sqrt()));
                    }
                    if self.requires(gain) {
                        let buf = grad_buf(&mut grads, gain.0, d);
                        for i in 0..m {
                            let (mean, inv) = stats[i];
                            for j in 0..d {
                                let xh = (xv[i * d + j] - mean) * inv;
                                buf[j] += g[i * d + j] * xh;
                            }
                        }
                    }
                    if self.requires(bias) {
                        let buf = grad_buf(&mut grads, bias.0, d);
                        for i in 0..m {
                            for j in 0..d {
                                buf[j] += g[i * d + j];
                            }
                        }
                    }
                    if self.requires(x) {
                        let buf = grad_buf(&mut grads, x.0, m * d);
                        for i in 0..m {
                            let (mean, inv) = stats[i];
                            let row = &xv[i * d..(i + 1) * d];
                            let gr = &g[i * d..(i + 1) * d];
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for j in 0..d {
                                let dxh = gr[j] * gv[j];
                                let xh = (row[j] - mean) * inv;
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh;
                            }
                            mean_dxh /= df;
                            mean_dxh_xh /= df;
                            for j in 0..d {
                                let dxh = gr[j] * gv[j];
                                let xh = (row[j] - mean) * inv;
                                buf[i * d + j] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                            }
                        }
                    }
                }
                Op::Gelu { a } => {
                    if self.requires(a) {
                        let av = self.nodes[a.0].value.values();
                        let buf = grad_buf(&mut grads, a.0, g.len());
                        for ((o, &gi), &x) in buf.iter_mut().zip(&g).zip(av) {
                            *o += gi * gelu_bwd(x);
                        }
                    }
                }
                Op::SinCosInterleaved { a } => {
                    if self.requires(a) {
                        let (m, nn) = value.dims2()?;
                        let av = self.nodes[a.0].value.values();
                        let buf = grad_buf(&mut grads, a.0, m * nn);
                        for i in 0..m {
                            for j in 0..nn {
                                let x = av[i * nn + j];
                                let d = if j % 2 == 0 { x.cos() } else { -x.sin() };
                                buf[i * nn + j] += g[i * nn + j] * d;
                            }
                        }
                    }
                }
                Op::Sqrt { a } => {
                    if self.requires(a) {
                        let y = value.values().to_vec();
                        let buf = grad_buf(&mut grads, a.0, g.len());
                        for ((o, &gi), &yv) in buf.iter_mut().zip(&g).zip(&y) {
                            *o += gi * 0.5 / yv;
                        }
                    }
                }
                Op::ConcatCols { ref parts } => {
                    let parts = parts.clone();
                    let (m, total) = value.dims2()?;
                    let mut off = 0;
                    for p in parts {
                        let (_, w) = self.nodes[p.0].value.dims2()?;
                        if self.requires(p) {
                            let buf = grad_buf(&mut grads, p.0, m * w);
                            for i in 0..m {
                                for j in 0..w {
                                    buf[i * w + j] += g[i * total + off + j];
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    if self.requires(a) {
                        let (m, nn) = self.nodes[a.0].value.dims2()?;
                        let buf = grad_buf(&mut grads, a.0, m * nn);
                        for i in 0..m {
                            for j in 0..len {
                                buf[i * nn + start + j] += g[i * len + j];
                            }
                        }
                    }
                }
                Op::GatherRows { a, ref idx } => {
                    if self.requires(a) {
                        let idx = idx.clone();
                        let (_, nn) = self.nodes[a.0].value.dims2()?;
                        let len = self.nodes[a.0].value.len();
                        let buf = grad_buf(&mut grads, a.0, len);
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..nn {
                                buf[i * nn + j] += g[r * nn + j];
                            }
                        }
                    }
                }
                Op::SumAll { a } => {
                    if self.requires(a) {
                        let gi = g[0];
                        let len = self.nodes[a.0].value.len();
                        let buf = grad_buf(&mut grads, a.0, len);
                        for o in buf.iter_mut() {
                            *o += gi;
                        }
                    }
                }
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].value.grad = Some(g);
            }
        }
        Ok(())
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests;
