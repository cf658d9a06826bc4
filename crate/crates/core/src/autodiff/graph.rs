use crate::autodiff::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Glu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    DepthwiseConv { x: Var, w: Var, b: Option<Var> },
    PointwiseConv { x: Var, w: Var, b: Var },
    StridedConv { x: Var, w: Var, b: Var, stride: usize, kernel: usize, cols: Vec<T> },
    SoftmaxRows { x: Var, divisor: T },
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Sum(Var),
    /// Scalar-valued function of one input whose local gradient was computed in the forward pass.
    Fused { x: Var, local_grad: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Swish(x)
            | Op::Glu(x)
            | Op::LogSoftmaxRows(x)
            | Op::Sum(x) => vec![*x],
            Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::SoftmaxRows { x, .. }
            | Op::Fused { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::DepthwiseConv { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::PointwiseConv { x, w, b } | Op::StridedConv { x, w, b, .. } => vec![*x, *w, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Every primitive appends one node; [`Graph::backward`] walks the nodes in
/// reverse execution order. Nodes that do not depend on a gradient-requiring
/// leaf are recorded as values only.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a gradient-requiring leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims2("matmul", a)?;
        let (m2, p) = self.dims2("matmul", b)?;
        if m != m2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * p];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, n, m, p);
        let value = Tensor::new(&[n, p], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(mismatch("add-row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let (rows, _) = self.dims2("concat", first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2("concat", x)?;
            if r != rows {
                return Err(mismatch("concat", self.shape(first), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice", x)?;
        if len == 0 || start + len > c {
            return Err(invalid("slice", format!("columns {start}..{} out of 0..{c}", start + len)));
        }
        let xv = self.value(x).data();
        let out: Vec<T> = (0..r).flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied()).collect();
        let value = Tensor::new(&[r, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice", x)?;
        if len == 0 || start + len > r {
            return Err(invalid("slice", format!("rows {start}..{} out of 0..{r}", start + len)));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(&[len, c], out)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Swish(x))
    }

    /// Gated linear unit: splits the last axis in half as `[a | b]` and returns `a ⊙ sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if !d.is_multiple_of(2) {
            return Err(invalid("glu", format!("last axis {d} is not even")));
        }
        let h = d / 2;
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * h);
        for i in 0..rows {
            let r = xv.row(i);
            out.extend((0..h).map(|j| r[j] * sigmoid(r[h + j])));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("shape") = h;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Glu(x)))
    }

    /// Gathers rows of `table[V×d]` into an `ids.len() × d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(invalid("embedding", "empty id list"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { token: id, vocab: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: T) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(mismatch("masked-fill", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::MaskedFill { x, mask: mask.to_vec() }))
    }

    /// Per-channel convolution along time with zero "same" padding.
    ///
    /// `x` is `[n×c]`, `w` is `[c×k]` with odd `k`, optional `b` is `[c]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, c) = self.dims2("depthwise-conv1d", x)?;
        let (wc, k) = self.dims2("depthwise-conv1d", w)?;
        if wc != c {
            return Err(mismatch("depthwise-conv1d", self.shape(x), self.shape(w)));
        }
        if k % 2 == 0 {
            return Err(invalid("depthwise-conv1d", format!("kernel size {k} must be odd")));
        }
        if let Some(b) = b {
            if self.value(b).numel() != c {
                return Err(mismatch("depthwise-conv1d", self.shape(x), self.shape(b)));
            }
        }
        let half = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * c];
        for t in 0..n {
            for j in 0..k {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    out[t * c + ch] += wv[ch * k + j] * xv[src * c + ch];
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o += bv[i % c]);
        }
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::DepthwiseConv { x, w, b }))
    }

    /// Kernel-1 convolution: `x[n×c_in] · w[c_in×c_out] + b`.
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, cin) = self.dims2("pointwise-conv1d", x)?;
        let (wi, cout) = self.dims2("pointwise-conv1d", w)?;
        if wi != cin {
            return Err(mismatch("pointwise-conv1d", self.shape(x), self.shape(w)));
        }
        if self.value(b).numel() != cout {
            return Err(mismatch("pointwise-conv1d", self.shape(w), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * cout];
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, n, cin, cout);
        let bv = self.value(b).data();
        out.iter_mut().enumerate().for_each(|(i, o)| *o += bv[i % cout]);
        let value = Tensor::new(&[n, cout], out)?;
        Ok(self.push(value, Op::PointwiseConv { x, w, b }))
    }

    /// Unpadded ("valid") strided convolution along time.
    ///
    /// `x` is `[len×c_in]`, `w` is `[(kernel·c_in)×c_out]` laid out tap-major,
    /// `b` is `[c_out]`. Output length is `⌊(len − kernel)/stride⌋ + 1`.
    pub fn strided_conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (len, cin) = self.dims2("strided-conv1d", x)?;
        let (wr, cout) = self.dims2("strided-conv1d", w)?;
        if kernel == 0 || stride == 0 {
            return Err(invalid("strided-conv1d", "kernel and stride must be positive"));
        }
        if wr != kernel * cin {
            return Err(mismatch("strided-conv1d", self.shape(x), self.shape(w)));
        }
        if self.value(b).numel() != cout {
            return Err(mismatch("strided-conv1d", self.shape(w), self.shape(b)));
        }
        if len < kernel {
            return Err(Error::TooShort {
                what: "strided-conv1d",
                len,
                min: kernel,
            });
        }
        let out_len = (len - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut cols = Vec::with_capacity(out_len * kernel * cin);
        for t in 0..out_len {
            cols.extend_from_slice(&xv[t * stride * cin..(t * stride + kernel) * cin]);
        }
        let mut out = vec![T::zero(); out_len * cout];
        gemm_acc(&cols, self.value(w).data(), &mut out, out_len, kernel * cin, cout);
        let bv = self.value(b).data();
        out.iter_mut().enumerate().for_each(|(i, o)| *o += bv[i % cout]);
        let value = Tensor::new(&[out_len, cout], out)?;
        Ok(self.push(
            value,
            Op::StridedConv {
                x,
                w,
                b,
                stride,
                kernel,
                cols,
            },
        ))
    }

    /// Row-wise `softmax(x / divisor)` with max subtraction.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn softmax_rows(&mut self, x: Var, divisor: T) -> Result<Var> {
        if !(divisor > T::zero()) {
            return Err(invalid("softmax", "divisor must be positive"));
        }
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let d = xv.last_dim();
        let mut out = Vec::with_capacity(xv.numel());
        for i in 0..xv.rows() {
            let r = xv.row(i);
            let mx = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut z = T::zero();
            for &v in r {
                let e = ((v - mx) / divisor).exp();
                z += e;
                out.push(e);
            }
            out[start..start + d].iter_mut().for_each(|e| *e /= z);
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::SoftmaxRows { x, divisor }))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite { op: "log-softmax" });
        }
        let mut out = Vec::with_capacity(xv.numel());
        for i in 0..xv.rows() {
            let r = xv.row(i);
            let mx = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + r.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.extend(r.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::LogSoftmaxRows(x)))
    }

    /// Normalizes each vector along the last axis, then applies `gain` and `bias`.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).numel() != d {
            return Err(mismatch("layer-norm", xv.shape(), self.shape(gain)));
        }
        if self.value(bias).numel() != d {
            return Err(mismatch("layer-norm", xv.shape(), self.shape(bias)));
        }
        if !(eps > T::zero()) {
            return Err(invalid("layer-norm", "eps must be positive"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::of(d as f64);
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().copied().sum::<T>() / dn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in r.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Records a scalar function of `x` given its value and `∂value/∂x`.
    ///
    /// Used by fused loss kernels that compute their own gradient.
    pub fn fused_scalar(&mut self, x: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).numel() {
            return Err(mismatch("fused", self.shape(x), &[local_grad.len()]));
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { x, local_grad }))
    }

    /// Propagates `∂root/∂·` to every gradient-requiring leaf, accumulating into
    /// the leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(invalid(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.shape(root)),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Accumulator for input `v`, allocated on first touch.
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
        }
        let out = &nodes[id].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, m) = (shp(*a)[0], shp(*a)[1]);
                let p = shp(*b)[1];
                if wants(*a) {
                    let bv = val(*b);
                    gemm_nt_acc(g, bv, slot(grads, nodes, *a), n, m, p);
                }
                if wants(*b) {
                    let av = val(*a);
                    gemm_tn_acc(av, g, slot(grads, nodes, *b), n, m, p);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if wants(v) {
                        slot(grads, nodes, v).iter_mut().zip(g).for_each(|(s, &gv)| *s += sign * gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(v) {
                        slot(grads, nodes, v).iter_mut().zip(g).for_each(|(s, &gv)| *s += sign * gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    let s = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let s = slot(grads, nodes, *b);
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(s, &gv)| *s += gv);
                }
                if wants(*b) {
                    let d = out.last_dim();
                    let s = slot(grads, nodes, *b);
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] += gv;
                    }
                }
            }
            Op::Scale(x, k) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(s, &gv)| *s += *k * gv);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (shp(*x)[0], shp(*x)[1]);
                    let s = slot(grads, nodes, *x);
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(s, &gv)| *s += gv);
                }
            }
            Op::ConcatCols(xs) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &x in xs {
                    let w = shp(x)[1];
                    if wants(x) {
                        let s = slot(grads, nodes, x);
                        for i in 0..rows {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let c = shp(*x)[1];
                    let len = out.last_dim();
                    let s = slot(grads, nodes, *x);
                    for i in 0..out.rows() {
                        for j in 0..len {
                            s[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let c = shp(*x)[1];
                    let s = slot(grads, nodes, *x);
                    s[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(s, &gv)| *s += gv);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let s = slot(grads, nodes, *x);
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = out.data();
                    let s = slot(grads, nodes, *x);
                    for i in 0..g.len() {
                        s[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Swish(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let s = slot(grads, nodes, *x);
                    for i in 0..g.len() {
                        let sg = sigmoid(xv[i]);
                        s[i] += g[i] * (sg + xv[i] * sg * (T::one() - sg));
                    }
                }
            }
            Op::Glu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = shp(*x).last().copied().unwrap_or(0);
                    let h = d / 2;
                    let s = slot(grads, nodes, *x);
                    for i in 0..out.rows() {
                        for j in 0..h {
                            let a = xv[i * d + j];
                            let sb = sigmoid(xv[i * d + h + j]);
                            let gv = g[i * h + j];
                            s[i * d + j] += gv * sb;
                            s[i * d + h + j] += gv * a * sb * (T::one() - sb);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = shp(*table)[1];
                    let s = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if wants(*x) {
                    let s = slot(grads, nodes, *x);
                    for i in 0..g.len() {
                        if !mask[i] {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, w, b } => {
                let (n, c) = (shp(*x)[0], shp(*x)[1]);
                let k = shp(*w)[1];
                let half = k / 2;
                let xv = val(*x);
                let wv = val(*w);
                if wants(*x) {
                    let s = slot(grads, nodes, *x);
                    for t in 0..n {
                        for j in 0..k {
                            let src = t as isize + j as isize - half as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..c {
                                s[src * c + ch] += wv[ch * k + j] * g[t * c + ch];
                            }
                        }
                    }
                }
                if wants(*w) {
                    let s = slot(grads, nodes, *w);
                    for t in 0..n {
                        for j in 0..k {
                            let src = t as isize + j as isize - half as isize;
                            if src < 0 || src >= n as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..c {
                                s[ch * k + j] += xv[src * c + ch] * g[t * c + ch];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let s = slot(grads, nodes, *b);
                        for (i, &gv) in g.iter().enumerate() {
                            s[i % c] += gv;
                        }
                    }
                }
            }
            Op::PointwiseConv { x, w, b } => {
                let (n, cin) = (shp(*x)[0], shp(*x)[1]);
                let cout = shp(*w)[1];
                if wants(*x) {
                    let wv = val(*w);
                    gemm_nt_acc(g, wv, slot(grads, nodes, *x), n, cin, cout);
                }
                if wants(*w) {
                    let xv = val(*x);
                    gemm_tn_acc(xv, g, slot(grads, nodes, *w), n, cin, cout);
                }
                if wants(*b) {
                    let s = slot(grads, nodes, *b);
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % cout] += gv;
                    }
                }
            }
            Op::StridedConv {
                x,
                w,
                b,
                stride,
                kernel,
                cols,
            } => {
                let cin = shp(*x)[1];
                let cout = shp(*w)[1];
                let out_len = out.rows();
                let width = kernel * cin;
                if wants(*x) {
                    let mut dcols = vec![T::zero(); out_len * width];
                    gemm_nt_acc(g, val(*w), &mut dcols, out_len, width, cout);
                    let s = slot(grads, nodes, *x);
                    for t in 0..out_len {
                        let base = t * stride * cin;
                        for (k, &dv) in dcols[t * width..(t + 1) * width].iter().enumerate() {
                            s[base + k] += dv;
                        }
                    }
                }
                if wants(*w) {
                    gemm_tn_acc(cols, g, slot(grads, nodes, *w), out_len, width, cout);
                }
                if wants(*b) {
                    let s = slot(grads, nodes, *b);
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % cout] += gv;
                    }
                }
            }
            Op::SoftmaxRows { x, divisor } => {
                if wants(*x) {
                    let d = out.last_dim();
                    let y = out.data();
                    let s = slot(grads, nodes, *x);
                    for i in 0..out.rows() {
                        let yr = &y[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            s[i * d + j] += yr[j] * (gr[j] - dot) / *divisor;
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if wants(*x) {
                    let d = out.last_dim();
                    let y = out.data();
                    let s = slot(grads, nodes, *x);
                    for i in 0..out.rows() {
                        let gr = &g[i * d..(i + 1) * d];
                        let gs: T = gr.iter().copied().sum();
                        for j in 0..d {
                            s[i * d + j] += gr[j] - y[i * d + j].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let rows = out.rows();
                let gv = val(*gain);
                if wants(*x) {
                    let dn = T::of(d as f64);
                    let s = slot(grads, nodes, *x);
                    for i in 0..rows {
                        let h = &xhat[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * h[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s[i * d + j] += inv_std[i] * (dh - m1 - h[j] * m2);
                        }
                    }
                }
                if wants(*gain) {
                    let s = slot(grads, nodes, *gain);
                    for i in 0..rows * d {
                        s[i % d] += g[i] * xhat[i];
                    }
                }
                if wants(*bias) {
                    let s = slot(grads, nodes, *bias);
                    for i in 0..rows * d {
                        s[i % d] += g[i];
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let g0 = g[0];
                    slot(grads, nodes, *x).iter_mut().for_each(|s| *s += g0);
                }
            }
            Op::Fused { x, local_grad } => {
                if wants(*x) {
                    let g0 = g[0];
                    slot(grads, nodes, *x).iter_mut().zip(local_grad).for_each(|(s, &l)| *s += g0 * l);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let y = g.depthwise_conv1d(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 1]));
        let w = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.depthwise_conv1d(x, w, None).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0f64.ln(), 3.0f64.ln(), 5.0, 5.0]));
        let y = g.softmax_rows(x, 1.0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);
        let z = g.constant(t(&[1, 4], &[0.0; 4]));
        let y = g.softmax_rows(z, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax_rows(x, 1.0), Err(Error::NonFinite { .. })));
        let y = g.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(g.softmax_rows(y, 0.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let g2 = g.constant(Tensor::full(&[2], 1.0));
        let b2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[-1.0, 1.0]));
        let y = g.layer_norm(x, g2, b2, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-11 && (v[1] - 1.0).abs() < 1e-11);

        let gain0 = g.constant(Tensor::zeros(&[3]));
        let bias = g.constant(t(&[3], &[0.5, -2.0, 7.0]));
        let x = g.constant(t(&[1, 3], &[3.0, -1.0, 10.0]));
        let y = g.layer_norm(x, gain0, bias, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0, 7.0]);

        let bad = g.constant(Tensor::zeros(&[4]));
        assert!(g.layer_norm(x, bad, bias, 1e-12).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        // accumulates until zeroed
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_record_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y);
        assert!(g.requires_grad(s));
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 2.0]);
    }
}
