//! Reverse-mode differentiation tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value, so
//! node indices are already a topological order and `backward` is a single
//! reverse sweep. A tape is single-threaded; use one tape per training run.

use crate::error::{Error, Result};
use crate::fourier::{plane_dims, transform_planes};
use crate::numeric::kernels::{
    depthwise3x3_backward, depthwise3x3_forward, gemm, gemm_nt, gemm_tn, hwc_dims,
    layer_norm_backward, layer_norm_forward, leaky, log_softmax_rows, softmax_rows,
};
use crate::numeric::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    TransposeLast2(usize),
    Reshape(usize),
    BroadcastTo(usize, Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    AddBias(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    DepthwiseConv3x3 {
        x: usize,
        kernel: usize,
        bias: usize,
    },
    Dft2d(usize),
    Idft2dReal(usize, usize),
    L2Normalize(usize),
    Gather(usize, Vec<usize>),
    Select0(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::TransposeLast2(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::AddBias(..) => "add_bias",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DepthwiseConv3x3 { .. } => "depthwise_conv3x3",
            Op::Dft2d(..) => "dft2d",
            Op::Idft2dReal(..) => "idft2d",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Gather(..) => "gather",
            Op::Select0(..) => "select",
        }
    }
}

struct Node<T: Scalar> {
    op: Op,
    value: Tensor<T>,
    /// Cached forward intermediates needed by the backward rule.
    aux: Vec<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    first_non_finite: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every recorded node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`; zero if `v` does not reach it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

/// For each flat index of `dst`, the flat index of `src` it reads under
/// right-aligned broadcasting.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let lead = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let (s, d) = (src[i], dst[lead + i]);
        if s == d {
            strides[lead + i] = acc;
        } else if s != 1 {
            return None;
        }
        acc *= s;
    }
    let total: usize = dst.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..dst.len()).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
            first_non_finite: None,
        }
    }

    /// Records the first node whose value contains NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, aux: Vec<T>, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push_node(op, value, aux, requires_grad)
    }

    fn push_node(&mut self, op: Op, value: Tensor<T>, aux: Vec<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.check_finite && self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            op,
            value,
            aux,
            requires_grad,
        });
        Var(id)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Op::Leaf, value, Vec::new(), true)
    }

    /// An input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Op::Leaf, value, Vec::new(), false)
    }

    /// Registers an `f32` parameter, casting it to the tape's element type.
    pub fn param(&mut self, value: &Tensor<f32>) -> Var {
        self.leaf(value.cast())
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(T) -> T) -> Var {
        let value = self.val(x).map(f);
        self.push(op, value, Vec::new(), &[x.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.val(a).zip_map(self.val(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), value, Vec::new(), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.val(a).zip_map(self.val(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), value, Vec::new(), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), value, Vec::new(), &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::of(c);
        self.unary(Op::Scale(x.0, c), x, |v| v * ct)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let ct = T::of(c);
        self.unary(Op::Offset(x.0), x, |v| v + ct)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Op::Abs(x.0), x, |v| v.abs())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp(x.0), x, |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log(x.0), x, |v| v.ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Op::Sqrt(x.0), x, |v| v.sqrt())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh(x.0), x, |v| v.tanh())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(Op::LeakyRelu(x.0, slope), x, |v| leaky(v, s))
    }

    /// `[.., K] x [K, N] -> [.., N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.val(a).shape(), self.val(b).shape());
        if ashape.is_empty() || bshape.len() != 2 || *ashape.last().unwrap() != bshape[0] {
            return Err(Error::dim("matmul", format!("{ashape:?} x {bshape:?}")));
        }
        let (k, n) = (bshape[0], bshape[1]);
        let m = self.val(a).len() / k;
        let mut shape = ashape.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = gemm(self.val(a).data(), self.val(b).data(), m, k, n);
        Ok(self.push(
            Op::MatMul(a.0, b.0),
            Tensor::from_parts(shape, out),
            Vec::new(),
            &[a.0, b.0],
        ))
    }

    /// `[B, M, K] x [B, K, N] -> [B, M, N]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.val(a).shape(), self.val(b).shape());
        if ashape.len() != 3
            || bshape.len() != 3
            || ashape[0] != bshape[0]
            || ashape[2] != bshape[1]
        {
            return Err(Error::dim(
                "batch_matmul",
                format!("{ashape:?} x {bshape:?}"),
            ));
        }
        let (bn, m, k, n) = (ashape[0], ashape[1], ashape[2], bshape[2]);
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = Vec::with_capacity(bn * m * n);
        for i in 0..bn {
            out.extend(gemm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        Ok(self.push(
            Op::BatchMatMul(a.0, b.0),
            Tensor::from_parts(vec![bn, m, n], out),
            Vec::new(),
            &[a.0, b.0],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.val(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(
                "transpose",
                format!("rank {} input", shape.len()),
            ));
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let out = transpose_last2(self.val(x).data(), m, n);
        let mut oshape = shape;
        oshape.swap(r - 2, r - 1);
        Ok(self.push(
            Op::TransposeLast2(x.0),
            Tensor::from_parts(oshape, out),
            Vec::new(),
            &[x.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x.0), value, Vec::new(), &[x.0]))
    }

    /// Right-aligned broadcasting to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.val(x).shape().to_vec();
        let map = broadcast_map(&src, shape)
            .ok_or_else(|| Error::dim("broadcast_to", format!("{src:?} -> {shape:?}")))?;
        let data = self.val(x).data();
        let out = map.iter().map(|&i| data[i]).collect();
        Ok(self.push(
            Op::BroadcastTo(x.0, src),
            Tensor::from_parts(shape.to_vec(), out),
            Vec::new(),
            &[x.0],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = T::of(self.val(x).sum());
        self.push(Op::SumAll(x.0), Tensor::scalar(total), Vec::new(), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = T::of(self.val(x).mean());
        self.push(Op::MeanAll(x.0), Tensor::scalar(m), Vec::new(), &[x.0])
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.val(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (pre, n, post) = axis_split(&shape, axis);
        let d = self.val(x).data();
        let mut out = vec![T::zero(); pre * post];
        for p in 0..pre {
            for i in 0..n {
                let src = &d[(p * n + i) * post..][..post];
                for (o, &v) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        Ok(self.push(
            Op::SumAxis(x.0, axis),
            Tensor::from_parts(oshape, out),
            Vec::new(),
            &[x.0],
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .val(x)
            .shape()
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.val(x).last_dim();
        let out = softmax_rows(self.val(x).data(), n);
        let shape = self.val(x).shape().to_vec();
        self.push(
            Op::Softmax(x.0),
            Tensor::from_parts(shape, out),
            Vec::new(),
            &[x.0],
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = self.val(x).last_dim();
        let out = log_softmax_rows(self.val(x).data(), n);
        let shape = self.val(x).shape().to_vec();
        self.push(
            Op::LogSoftmax(x.0),
            Tensor::from_parts(shape, out),
            Vec::new(),
            &[x.0],
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let base = self.val(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.val(v).shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} vs {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (pre, _, post) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for &v in xs {
                let n = self.val(v).shape()[axis];
                out.extend_from_slice(&self.val(v).data()[p * n * post..(p + 1) * n * post]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(
            Op::Concat(parents.clone(), axis),
            Tensor::from_parts(shape, out),
            Vec::new(),
            &parents,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.val(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("{start}+{len} on axis {axis} of {shape:?}"),
            ));
        }
        let (pre, n, post) = axis_split(&shape, axis);
        let d = self.val(x).data();
        let mut out = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            out.extend_from_slice(&d[(p * n + start) * post..(p * n + start + len) * post]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
            Tensor::from_parts(oshape, out),
            Vec::new(),
            &[x.0],
        ))
    }

    /// Takes `x[index]` along the first axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.val(x).shape().to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::dim("select", format!("index {index} of {shape:?}")));
        }
        let chunk = self.val(x).len() / shape[0];
        let out = self.val(x).data()[index * chunk..(index + 1) * chunk].to_vec();
        Ok(self.push(
            Op::Select0(x.0, index),
            Tensor::from_parts(shape[1..].to_vec(), out),
            Vec::new(),
            &[x.0],
        ))
    }

    /// Adds a `[N]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.val(x).last_dim();
        if self.val(bias).shape() != [n] {
            return Err(Error::dim(
                "add_bias",
                format!(
                    "bias {:?} for input {:?}",
                    self.val(bias).shape(),
                    self.val(x).shape()
                ),
            ));
        }
        let mut value = self.val(x).clone();
        let b = self.val(bias).data().to_vec();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBias(x.0, bias.0), value, Vec::new(), &[x.0, bias.0]))
    }

    /// `x W + b` over the last axis.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    /// Per-pixel channel mixing of a channels-last map.
    pub fn pointwise_conv(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.linear(x, weight, bias)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.val(x).last_dim();
        if self.val(gamma).shape() != [n] || self.val(beta).shape() != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!("affine params do not match axis of {n}"),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm", "eps must be positive"));
        }
        let (y, mut xhat, inv_std) = layer_norm_forward(
            self.val(x).data(),
            self.val(gamma).data(),
            self.val(beta).data(),
            eps,
        );
        xhat.extend(inv_std);
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            Tensor::from_parts(shape, y),
            xhat,
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn depthwise_conv3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let dims = hwc_dims(self.val(x).shape(), "depthwise_conv3x3")?;
        let c = dims.3;
        if self.val(kernel).shape() != [3, 3, c] || self.val(bias).shape() != [c] {
            return Err(Error::dim(
                "depthwise_conv3x3",
                format!(
                    "kernel {:?} / bias {:?} for {c} channels",
                    self.val(kernel).shape(),
                    self.val(bias).shape()
                ),
            ));
        }
        let out = depthwise3x3_forward(
            self.val(x).data(),
            self.val(kernel).data(),
            self.val(bias).data(),
            dims,
        );
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(
            Op::DepthwiseConv3x3 {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
            },
            Tensor::from_parts(shape, out),
            Vec::new(),
            &[x.0, kernel.0, bias.0],
        ))
    }

    /// Orthonormal per-channel 2D DFT of a real map; returns `(real, imag)`.
    pub fn dft2d(&mut self, x: Var) -> Result<(Var, Var)> {
        let shape = self.val(x).shape().to_vec();
        let dims = plane_dims(&shape, "dft2d")?;
        let (mut re, im) = transform_planes(self.val(x).data(), None, dims, false);
        re.extend(im);
        let mut stacked = vec![2];
        stacked.extend(&shape);
        let both = self.push(
            Op::Dft2d(x.0),
            Tensor::from_parts(stacked, re),
            Vec::new(),
            &[x.0],
        );
        Ok((self.select(both, 0)?, self.select(both, 1)?))
    }

    /// Real part of the orthonormal inverse DFT of `real + j*imag`.
    pub fn idft2d(&mut self, real: Var, imag: Var) -> Result<Var> {
        self.same_shape(real, imag, "idft2d")?;
        let shape = self.val(real).shape().to_vec();
        let dims = plane_dims(&shape, "idft2d")?;
        let (re, _) = transform_planes(
            self.val(real).data(),
            Some(self.val(imag).data()),
            dims,
            true,
        );
        Ok(self.push(
            Op::Idft2dReal(real.0, imag.0),
            Tensor::from_parts(shape, re),
            Vec::new(),
            &[real.0, imag.0],
        ))
    }

    /// Scales each last-axis row to unit length.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-12;
        let n = self.val(x).last_dim();
        let mut value = self.val(x).clone();
        let mut norms = Vec::with_capacity(value.len() / n.max(1));
        for row in value.data_mut().chunks_exact_mut(n) {
            let norm = (row.iter().map(|&v| v * v).sum::<T>() + T::of(EPS)).sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.push(Op::L2Normalize(x.0), value, norms, &[x.0])
    }

    /// Rows of a `[V, D]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.val(table).shape();
        if shape.len() != 2 {
            return Err(Error::dim("gather", format!("table shape {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim(
                "gather",
                format!("id {bad} outside table of {v} rows"),
            ));
        }
        let data = self.val(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Op::Gather(table.0, ids.to_vec()),
            Tensor::from_parts(vec![ids.len(), d], out),
            Vec::new(),
            &[table.0],
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.val(root);
        if rv.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, has shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
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

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], i: usize, contrib: Vec<T>) {
        if !self.needs(i) {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let data = |p: usize| self.nodes[p].value.data();
        let shape = |p: usize| self.nodes[p].value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(
                        grads,
                        a,
                        g.iter().zip(data(b)).map(|(&gv, &bv)| gv * bv).collect(),
                    );
                }
                if self.needs(b) {
                    self.accumulate(
                        grads,
                        b,
                        g.iter().zip(data(a)).map(|(&gv, &av)| gv * av).collect(),
                    );
                }
            }
            &Op::Scale(x, c) => {
                let c = T::of(c);
                self.accumulate(grads, x, g.iter().map(|&v| v * c).collect());
            }
            &Op::Offset(x) | &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Abs(x) => {
                let gx = g
                    .iter()
                    .zip(data(x))
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Exp(x) => self.accumulate(
                grads,
                x,
                g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect(),
            ),
            &Op::Log(x) => self.accumulate(
                grads,
                x,
                g.iter().zip(data(x)).map(|(&gv, &xv)| gv / xv).collect(),
            ),
            &Op::Sqrt(x) => {
                let half = T::of(0.5);
                self.accumulate(
                    grads,
                    x,
                    g.iter().zip(y).map(|(&gv, &yv)| gv * half / yv).collect(),
                )
            }
            &Op::Tanh(x) => self.accumulate(
                grads,
                x,
                g.iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect(),
            ),
            &Op::LeakyRelu(x, slope) => {
                let s = T::of(slope);
                let gx = g
                    .iter()
                    .zip(data(x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * s })
                    .collect();
                self.accumulate(grads, x, gx);
            }
            &Op::MatMul(a, b) => {
                let bs = shape(b);
                let (k, n) = (bs[0], bs[1]);
                let m = g.len() / n;
                if self.needs(a) {
                    self.accumulate(grads, a, gemm_nt(g, data(b), m, n, k));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, gemm_tn(data(a), g, m, k, n));
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (as_, bs) = (shape(a), shape(b));
                let (bn, m, k, n) = (as_[0], as_[1], as_[2], bs[2]);
                if self.needs(a) {
                    let mut ga = Vec::with_capacity(bn * m * k);
                    for t in 0..bn {
                        ga.extend(gemm_nt(
                            &g[t * m * n..][..m * n],
                            &data(b)[t * k * n..][..k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let mut gb = Vec::with_capacity(bn * k * n);
                    for t in 0..bn {
                        gb.extend(gemm_tn(
                            &data(a)[t * m * k..][..m * k],
                            &g[t * m * n..][..m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::TransposeLast2(x) => {
                let s = shape(x);
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                self.accumulate(grads, x, transpose_last2(g, n, m));
            }
            Op::BroadcastTo(x, src) => {
                let map = broadcast_map(src, node.value.shape()).expect("validated in forward");
                let mut gx = vec![T::zero(); src.iter().product()];
                for (&gv, &si) in g.iter().zip(&map) {
                    gx[si] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            &Op::SumAll(x) => self.accumulate(grads, x, vec![g[0]; data(x).len()]),
            &Op::MeanAll(x) => {
                let n = data(x).len();
                self.accumulate(grads, x, vec![g[0] / T::of(n as f64); n]);
            }
            &Op::SumAxis(x, axis) => {
                let (pre, n, post) = axis_split(shape(x), axis);
                let mut gx = Vec::with_capacity(pre * n * post);
                for p in 0..pre {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[p * post..(p + 1) * post]);
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Softmax(x) => {
                let n = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g
                    .chunks_exact(n)
                    .zip(y.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g
                    .chunks_exact(n)
                    .zip(y.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let total: T = gr.iter().copied().sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Concat(parents, axis) => {
                let (pre, total, post) = axis_split(node.value.shape(), *axis);
                let mut start = 0;
                for &p in parents {
                    let n = shape(p)[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(pre * n * post);
                        for q in 0..pre {
                            gp.extend_from_slice(
                                &g[(q * total + start) * post..(q * total + start + n) * post],
                            );
                        }
                        self.accumulate(grads, p, gp);
                    }
                    start += n;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (pre, n, post) = axis_split(shape(x), axis);
                let len = node.value.shape()[axis];
                let mut gx = vec![T::zero(); pre * n * post];
                for p in 0..pre {
                    gx[(p * n + start) * post..(p * n + start + len) * post]
                        .copy_from_slice(&g[p * len * post..(p + 1) * len * post]);
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Select0(x, index) => {
                let mut gx = vec![T::zero(); data(x).len()];
                gx[index * g.len()..(index + 1) * g.len()].copy_from_slice(g);
                self.accumulate(grads, x, gx);
            }
            &Op::AddBias(x, b) => {
                self.accumulate(grads, x, g.to_vec());
                if self.needs(b) {
                    let n = shape(b)[0];
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let (xhat, inv_std) = node.aux.split_at(g.len());
                let (gx, gg, gb) = layer_norm_backward(g, xhat, inv_std, data(gamma));
                self.accumulate(grads, x, gx);
                self.accumulate(grads, gamma, gg);
                self.accumulate(grads, beta, gb);
            }
            &Op::DepthwiseConv3x3 { x, kernel, bias } => {
                let dims = hwc_dims(shape(x), "depthwise_conv3x3").expect("validated in forward");
                let (gx, gk, gb) = depthwise3x3_backward(data(x), data(kernel), g, dims);
                self.accumulate(grads, x, gx);
                self.accumulate(grads, kernel, gk);
                self.accumulate(grads, bias, gb);
            }
            &Op::Dft2d(x) => {
                // adjoint of the orthonormal DFT is the inverse transform
                let dims = plane_dims(shape(x), "dft2d").expect("validated in forward");
                let half = g.len() / 2;
                let (gx, _) = transform_planes(&g[..half], Some(&g[half..]), dims, true);
                self.accumulate(grads, x, gx);
            }
            &Op::Idft2dReal(re, im) => {
                let dims = plane_dims(shape(re), "idft2d").expect("validated in forward");
                let (gr, gi) = transform_planes(g, None, dims, false);
                self.accumulate(grads, re, gr);
                self.accumulate(grads, im, gi);
            }
            &Op::L2Normalize(x) => {
                let n = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for (r, ((gr, yr), out)) in g
                    .chunks_exact(n)
                    .zip(y.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                    .enumerate()
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    let norm = node.aux[r];
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Gather(table, ids) => {
                let d = shape(*table)[1];
                let mut gt = vec![T::zero(); data(*table).len()];
                for (row, &id) in g.chunks_exact(d).zip(ids) {
                    for (a, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
        }
    }
}

fn transpose_last2<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(m * n).zip(out.chunks_exact_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}
