//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends one node to the tape; node ids are issued in
//! creation order, so the tape is already topologically sorted and backward
//! simply walks it in reverse. Leaves carry a `requires_grad` flag and a
//! gradient slot that accumulates across [`Graph::backward`] calls until
//! [`Graph::zero_grad`].

use crate::conv::{self, ConvGeom, Padding};
use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization mode.
#[derive(Debug, Clone)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics from a train-mode batch norm; variance is biased.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, T, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddBias { x: Var, bias: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    PickColumn { x: Var, col: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    MdcCompose { w: Var, k: Var, scales: usize },
    MinibatchL1 { m: Var, kernels: usize, dim: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

/// Split a shape around `axis` into `(outer, len, inner)`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Graph<T> {
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

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf { requires_grad }, value)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { requires_grad: true })
    }

    pub fn set_requires_grad(&mut self, v: Var, flag: bool) -> Result<()> {
        match &mut self.nodes[v.0].op {
            Op::Leaf { requires_grad } => {
                *requires_grad = flag;
                Ok(())
            }
            _ => Err(invalid("set_requires_grad on a non-leaf node")),
        }
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(op, value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.value(a).expect_same_shape(name, self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::MulScalar(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), T::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), T::ln)
    }

    /// `|x|` with subgradient `sign(0) = 0`.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), T::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), T::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::lit(t.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Flatten `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(x, [n, rest])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.value(x).dims2("transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        Ok(self.push(Op::Transpose(x), value))
    }

    /// `op(a) · op(b)` for rank-2 operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let [ar, ac] = self.value(a).dims2("matmul")?;
        let [br, bc] = self.value(b).dims2("matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                axis: "inner dimension".into(),
                expected: k,
                got: k2,
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(ta, tb, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Add a bias along axis 1 (columns of `[B,F]`, channels of NCHW).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Rank {
                op: "add_bias",
                expected: 2,
                got: shape,
            });
        }
        let b = self.value(bias);
        if b.len() != shape[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                axis: "axis 1".into(),
                expected: shape[1],
                got: b.len(),
            });
        }
        let (outer, ch, inner) = around_axis(&shape, 1);
        let mut out = self.value(x).data().to_vec();
        let bd = b.data();
        for o in 0..outer {
            for c in 0..ch {
                for v in &mut out[(o * ch + c) * inner..][..inner] {
                    *v += bd[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::AddBias { x, bias }, value))
    }

    /// `x · Wᵀ + b` with `W` stored `[out, in]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, weight, false, true)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    fn softmax_impl(&self, x: Var, axis: usize, log: bool) -> Tensor<T> {
        let t = self.value(x);
        let (outer, len, inner) = around_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|j| (src[at(j)] - max).exp()).sum();
                let lz = z.ln();
                for j in 0..len {
                    let shifted = src[at(j)] - max;
                    out[at(j)] = if log { shifted - lz } else { shifted.exp() / z };
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out).expect("same shape")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let value = self.softmax_impl(x, axis, false);
        Ok(self.push(Op::Softmax { x, axis }, value))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let value = self.softmax_impl(x, axis, true);
        Ok(self.push(Op::LogSoftmax { x, axis }, value))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() {
                return Err(Error::Rank {
                    op: "concat",
                    expected: base.len(),
                    got: s.to_vec(),
                });
            }
            for (ax, (&a, &b)) in base.iter().zip(s).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        axis: format!("axis {ax}"),
                        expected: a,
                        got: b,
                    });
                }
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        Ok(self.push(Op::SliceRows { x, start }, value))
    }

    /// Column `col` of a `[B, K]` tensor as a `[B]` vector.
    pub fn pick_column(&mut self, x: Var, col: usize) -> Result<Var> {
        let [b, k] = self.value(x).dims2("pick_column")?;
        if col >= k {
            return Err(Error::IndexOutOfRange { index: col, len: k });
        }
        let src = self.value(x).data();
        let value = Tensor::new([b], (0..b).map(|i| src[i * k + col]).collect())?;
        Ok(self.push(Op::PickColumn { x, col }, value))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::conv(
            self.value(x).dims4("conv2d")?,
            self.value(w).dims4("conv2d")?,
            stride,
            dilation,
            padding,
        )?;
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new([geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)?;
        Ok(self.push(Op::Conv2d { x, w, geom }, value))
    }

    /// Adjoint of `conv2d` with filters `[C_in, C_out, F, F]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::transpose(
            self.value(x).dims4("conv2d_transpose")?,
            self.value(w).dims4("conv2d_transpose")?,
            stride,
            padding,
        )?;
        let out = conv::conv2d_grad_input(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new([geom.batch, geom.in_ch, geom.in_h, geom.in_w], out)?;
        Ok(self.push(Op::ConvTranspose { x, w, geom }, value))
    }

    /// Batch normalization over axis 1 of a `[B,F]` or NCHW tensor.
    ///
    /// Train mode returns the batch statistics so the caller can maintain
    /// running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::Rank {
                op: "batch_norm",
                expected: 4,
                got: shape,
            });
        }
        let (n, ch) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).len() != ch {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    axis: format!("{name} channels"),
                    expected: ch,
                    got: self.value(p).len(),
                });
            }
        }
        let eps = T::lit(BN_EPS);
        let count = n * inner;
        let src = self.value(x).data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall {
                        op: "batch_norm (train mode)",
                        batch: n,
                        min: 2,
                    });
                }
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                let cnt = T::lit(count as f64);
                for c in 0..ch {
                    let vals = (0..n).flat_map(|b| src[(b * ch + c) * inner..][..inner].iter().copied());
                    let m = vals.clone().sum::<T>() / cnt;
                    let v = vals.map(|v| (v - m) * (v - m)).sum::<T>() / cnt;
                    mean[c] = m;
                    var[c] = v;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        axis: "running statistics channels".into(),
                        expected: ch,
                        got: mean.len(),
                    });
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for c in 0..ch {
                let off = (b * ch + c) * inner;
                for i in off..off + inner {
                    xhat[i] = (src[i] - mean[c]) * inv_std[c];
                    out[i] = xhat[i] * g[c] + bt[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let stats = train.then(|| BatchStats { mean, var, count });
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            value,
        );
        Ok((v, stats))
    }

    /// Compose a sparse `[N,C,E,E]` filter from a base bank `[N,C,F,F]` and
    /// per-filter scale weights `[N,S]`, with `E = F + (S-1)(F-1)`.
    ///
    /// Tap `(i,j)` at dilation `s` lands at `center + (i - (F-1)/2)·s`;
    /// overlapping taps sum.
    pub fn mdc_compose(&mut self, w: Var, k: Var) -> Result<Var> {
        let [n, c, f, f2] = self.value(w).dims4("mdc_compose")?;
        if f != f2 {
            return Err(Error::ShapeMismatch {
                op: "mdc_compose",
                axis: "filter width (axis 3)".into(),
                expected: f,
                got: f2,
            });
        }
        if f % 2 == 0 {
            return Err(invalid(format!("mdc_compose: filter size must be odd, got {f}")));
        }
        let [kn, scales] = self.value(k).dims2("mdc_compose")?;
        if kn != n {
            return Err(Error::ShapeMismatch {
                op: "mdc_compose",
                axis: "scale weights rows (filters)".into(),
                expected: n,
                got: kn,
            });
        }
        let e = composed_span(f, scales);
        let wd = self.value(w).data();
        let kd = self.value(k).data();
        let mut out = vec![T::zero(); n * c * e * e];
        for_each_tap(n, c, f, scales, |src, dst, filt, s| {
            out[dst] += kd[filt * scales + s] * wd[src];
        });
        let value = Tensor::new([n, c, e, e], out)?;
        Ok(self.push(Op::MdcCompose { w, k, scales }, value))
    }

    /// Minibatch-discrimination kernel on projected features `[B, A·D]`:
    /// `o[i,a] = Σ_j exp(-‖M[i,a,:] - M[j,a,:]‖₁)`, self term included.
    pub fn minibatch_l1(&mut self, m: Var, kernels: usize, dim: usize) -> Result<Var> {
        let [b, ad] = self.value(m).dims2("minibatch_discrimination")?;
        if ad != kernels * dim {
            return Err(Error::ShapeMismatch {
                op: "minibatch_discrimination",
                axis: "projected width".into(),
                expected: kernels * dim,
                got: ad,
            });
        }
        if b < 2 {
            return Err(Error::BatchTooSmall {
                op: "minibatch_discrimination",
                batch: b,
                min: 2,
            });
        }
        let md = self.value(m).data();
        let mut out = vec![T::zero(); b * kernels];
        for i in 0..b {
            for j in 0..b {
                for a in 0..kernels {
                    let l1: T = (0..dim)
                        .map(|d| (md[i * ad + a * dim + d] - md[j * ad + a * dim + d]).abs())
                        .sum();
                    out[i * kernels + a] += (-l1).exp();
                }
            }
        }
        let value = Tensor::new([b, kernels], out)?;
        Ok(self.push(Op::MinibatchL1 { m, kernels, dim }, value))
    }

    /// Accumulate `∂loss/∂leaf` into every leaf with `requires_grad`.
    ///
    /// Nodes that cannot reach such a leaf are skipped entirely.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_stopping(loss, &[])
    }

    /// Like [`Graph::backward`], but no gradient flows through the `stop`
    /// nodes; their values are treated as constants.
    pub fn backward_stopping(&mut self, loss: Var, stop: &[Var]) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let upto = loss.0 + 1;
        let mut needs = vec![false; upto];
        for i in 0..upto {
            needs[i] = match &self.nodes[i].op {
                _ if stop.contains(&Var(i)) => false,
                Op::Leaf { requires_grad } => *requires_grad,
                op => inputs(op).iter().any(|v| needs[v.0]),
            };
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; upto];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..upto).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, dg) in self.vjp(i, &g, &needs)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input that needs one.
    fn vjp(&self, i: usize, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| needs[v.0];
        let mut out = Vec::with_capacity(2);
        let elementwise = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            // f(x, y, g)
            let xv = val(x).data();
            let data = xv
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&a, &b), &c)| f(a, b, c))
                .collect();
            Tensor::new(val(x).shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, g.clone()));
                }
                if need(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, g.clone()));
                }
                if need(*b) {
                    out.push((*b, g.scale(-T::one())));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, g.zip_map(val(*b), |gv, bv| gv * bv)?));
                }
                if need(*b) {
                    out.push((*b, g.zip_map(val(*a), |gv, av| gv * av)?));
                }
            }
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::MulScalar(x, s) => out.push((*x, g.scale(*s))),
            Op::Exp(x) => out.push((*x, elementwise(*x, &|_, yv, gv| gv * yv))),
            Op::Log(x) => out.push((*x, elementwise(*x, &|xv, _, gv| gv / xv))),
            Op::Abs(x) => out.push((*x, elementwise(*x, &|xv, _, gv| gv * sign(xv)))),
            Op::Square(x) => out.push((*x, elementwise(*x, &|xv, _, gv| gv * (xv + xv)))),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                out.push((
                    *x,
                    elementwise(*x, &|xv, _, gv| if xv > lo && xv < hi { gv } else { T::zero() }),
                ))
            }
            Op::Relu(x) => out.push((*x, elementwise(*x, &|xv, _, gv| if xv > T::zero() { gv } else { T::zero() }))),
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                out.push((*x, elementwise(*x, &|xv, _, gv| if xv > T::zero() { gv } else { gv * slope })))
            }
            Op::Tanh(x) => out.push((*x, elementwise(*x, &|_, yv, gv| gv * (T::one() - yv * yv)))),
            Op::Sigmoid(x) => out.push((*x, elementwise(*x, &|_, yv, gv| gv * yv * (T::one() - yv)))),
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item()))),
            Op::Mean(x) => {
                let n = T::lit(val(*x).len() as f64);
                out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item() / n)))
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape().to_vec())?)),
            Op::Transpose(x) => {
                let [r, c] = val(*x).dims2("transpose")?;
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g.data()[j * r + i];
                    }
                }
                out.push((*x, Tensor::new([r, c], d)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let [m, n] = y.dims2("matmul")?;
                let [ar, ac] = av.dims2("matmul")?;
                let k = if *ta { ar } else { ac };
                if need(*a) {
                    // d op(a) = g · op(b)ᵀ ; store in a's layout.
                    let mut d = vec![T::zero(); av.len()];
                    if *ta {
                        // a stored [k, m]: da = op(b) · gᵀ
                        T::gemm(*tb, true, k, m, n, T::one(), bv.data(), g.data(), T::zero(), &mut d);
                    } else {
                        T::gemm(false, !*tb, m, k, n, T::one(), g.data(), bv.data(), T::zero(), &mut d);
                    }
                    out.push((*a, Tensor::new(av.shape().to_vec(), d)?));
                }
                if need(*b) {
                    let mut d = vec![T::zero(); bv.len()];
                    if *tb {
                        // b stored [n, k]: db = gᵀ · op(a)
                        T::gemm(true, *ta, n, k, m, T::one(), g.data(), av.data(), T::zero(), &mut d);
                    } else {
                        T::gemm(!*ta, false, k, n, m, T::one(), av.data(), g.data(), T::zero(), &mut d);
                    }
                    out.push((*b, Tensor::new(bv.shape().to_vec(), d)?));
                }
            }
            Op::AddBias { x, bias } => {
                if need(*x) {
                    out.push((*x, g.clone()));
                }
                if need(*bias) {
                    let (outer, ch, inner) = around_axis(g.shape(), 1);
                    let mut d = vec![T::zero(); ch];
                    for o in 0..outer {
                        for (c, dc) in d.iter_mut().enumerate() {
                            *dc += g.data()[(o * ch + c) * inner..][..inner].iter().copied().sum::<T>();
                        }
                    }
                    out.push((*bias, Tensor::new(val(*bias).shape().to_vec(), d)?));
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = around_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        if log {
                            let gs: T = (0..len).map(|j| gd[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = gd[at(j)] - yd[at(j)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), d)?));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = around_axis(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if need(p) {
                        let mut d = Vec::with_capacity(val(p).len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        out.push((p, Tensor::new(val(p).shape().to_vec(), d)?));
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let stride = xv.len() / xv.shape()[0];
                let mut d = vec![T::zero(); xv.len()];
                d[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                out.push((*x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::PickColumn { x, col } => {
                let [b, k] = val(*x).dims2("pick_column")?;
                let mut d = vec![T::zero(); b * k];
                for i in 0..b {
                    d[i * k + col] = g.data()[i];
                }
                out.push((*x, Tensor::new([b, k], d)?));
            }
            Op::Conv2d { x, w, geom } => {
                if need(*x) {
                    let d = conv::conv2d_grad_input(g.data(), val(*w).data(), geom);
                    out.push((*x, Tensor::new(val(*x).shape().to_vec(), d)?));
                }
                if need(*w) {
                    let d = conv::conv2d_grad_filter(g.data(), val(*x).data(), geom);
                    out.push((*w, Tensor::new(val(*w).shape().to_vec(), d)?));
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                // y = Aᵀx where A is the forward conv with filters w.
                if need(*x) {
                    let d = conv::conv2d_forward(g.data(), val(*w).data(), geom);
                    out.push((*x, Tensor::new(val(*x).shape().to_vec(), d)?));
                }
                if need(*w) {
                    let d = conv::conv2d_grad_filter(val(*x).data(), g.data(), geom);
                    out.push((*w, Tensor::new(val(*w).shape().to_vec(), d)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = y.shape();
                let (n, ch) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for b in 0..n {
                    for c in 0..ch {
                        let off = (b * ch + c) * inner;
                        for i in off..off + inner {
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                if need(*x) {
                    let gam = val(*gamma).data();
                    let mut d = vec![T::zero(); gd.len()];
                    let m = T::lit((n * inner) as f64);
                    for c in 0..ch {
                        let scale = gam[c] * inv_std[c];
                        for b in 0..n {
                            let off = (b * ch + c) * inner;
                            for i in off..off + inner {
                                d[i] = if *train {
                                    // dxhat = g·γ; dx = inv_std/m (m·dxhat − Σdxhat − xhat·Σ dxhat·xhat)
                                    scale * (gd[i] - dbeta[c] / m - xhat[i] * dgamma[c] / m)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(shape.to_vec(), d)?));
                }
                if need(*gamma) {
                    out.push((*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?));
                }
                if need(*beta) {
                    out.push((*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?));
                }
            }
            Op::MdcCompose { w, k, scales } => {
                let [n, c, f, _] = val(*w).dims4("mdc_compose")?;
                let (wd, kd, gd) = (val(*w).data(), val(*k).data(), g.data());
                if need(*w) {
                    let mut d = vec![T::zero(); wd.len()];
                    for_each_tap(n, c, f, *scales, |src, dst, filt, s| {
                        d[src] += kd[filt * scales + s] * gd[dst];
                    });
                    out.push((*w, Tensor::new(val(*w).shape().to_vec(), d)?));
                }
                if need(*k) {
                    let mut d = vec![T::zero(); kd.len()];
                    for_each_tap(n, c, f, *scales, |src, dst, filt, s| {
                        d[filt * scales + s] += wd[src] * gd[dst];
                    });
                    out.push((*k, Tensor::new(val(*k).shape().to_vec(), d)?));
                }
            }
            Op::MinibatchL1 { m, kernels, dim } => {
                let (kernels, dim) = (*kernels, *dim);
                let mv = val(*m);
                let [b, ad] = mv.dims2("minibatch_discrimination")?;
                let (md, gd) = (mv.data(), g.data());
                let mut d = vec![T::zero(); md.len()];
                for i in 0..b {
                    for j in 0..b {
                        if i == j {
                            continue;
                        }
                        for a in 0..kernels {
                            let row_i = &md[i * ad + a * dim..][..dim];
                            let row_j = &md[j * ad + a * dim..][..dim];
                            let l1: T = row_i.iter().zip(row_j).map(|(&p, &q)| (p - q).abs()).sum();
                            // both o[i,a] and o[j,a] contain this pair term
                            let coef = -(gd[i * kernels + a] + gd[j * kernels + a]) * (-l1).exp();
                            for dd in 0..dim {
                                d[i * ad + a * dim + dd] += coef * sign(row_i[dd] - row_j[dd]);
                            }
                        }
                    }
                }
                out.push((*m, Tensor::new([b, ad], d)?));
            }
        }
        Ok(out)
    }
}

/// Spatial size of the composed multiscale filter.
pub fn composed_span(f: usize, scales: usize) -> usize {
    f + (scales.max(1) - 1) * (f - 1)
}

/// Visit every (base tap, scale) pair of a multiscale composition as
/// `(base index, composed index, filter, scale)`.
pub(crate) fn for_each_tap(n: usize, c: usize, f: usize, scales: usize, mut visit: impl FnMut(usize, usize, usize, usize)) {
    let e = composed_span(f, scales);
    let center = (e - 1) / 2;
    let half = (f - 1) / 2;
    for filt in 0..n {
        for ch in 0..c {
            for s in 0..scales {
                let dil = s + 1;
                for i in 0..f {
                    let pi = center + i * dil - half * dil;
                    for j in 0..f {
                        let pj = center + j * dil - half * dil;
                        let src = ((filt * c + ch) * f + i) * f + j;
                        let dst = ((filt * c + ch) * e + pi) * e + pj;
                        visit(src, dst, filt, s);
                    }
                }
            }
        }
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AddScalar(x)
        | Op::MulScalar(x, _)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Abs(x)
        | Op::Square(x)
        | Op::Clamp(x, _, _)
        | Op::Relu(x)
        | Op::LeakyRelu(x, _)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Reshape(x)
        | Op::Transpose(x) => vec![*x],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::AddBias { x, bias } => vec![*x, *bias],
        Op::Softmax { x, .. } | Op::LogSoftmax { x, .. } | Op::SliceRows { x, .. } | Op::PickColumn { x, .. } => {
            vec![*x]
        }
        Op::Concat { parts, .. } => parts.clone(),
        Op::Conv2d { x, w, .. } | Op::ConvTranspose { x, w, .. } => vec![*x, *w],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::MdcCompose { w, k, .. } => vec![*w, *k],
        Op::MinibatchL1 { m, .. } => vec![*m],
    }
}
