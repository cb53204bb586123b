//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order. [`Graph::backward`] replays the tape in reverse, applying each
//! operation's vector-Jacobian product exactly once.

use log::warn;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Abs(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Place {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample2x(Var),
    Sum(Var),
    L1Mean {
        a: Var,
        b: Var,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar_mul",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Conv2d { .. } => "conv2d",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Place { .. } => "place",
            Op::Upsample2x(_) => "bilinear_upsample2x",
            Op::Sum(_) => "sum",
            Op::L1Mean { .. } => "l1_mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf. `None` when the leaf does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source index pairs and weights for bilinear x2 upsampling along one axis
/// (half-pixel centers, edge clamped).
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Tape of operations over tensors of scalar type `T`.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(usize, &'static str)>,
    warnings: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
            warnings: Vec::new(),
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Warnings raised during forward evaluation (e.g. empty masks).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Branch taken at every non-smooth point of the graph: the sign of each
    /// relu/abs input and of each kept l1 difference. Two evaluations with
    /// equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|v| *v > T::zero())),
                Op::Abs(x) => out.extend(self.value(*x).data().iter().map(|v| *v >= T::zero())),
                Op::L1Mean { a, b, mask, .. } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    for i in 0..va.len() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            out.push(va[i] >= vb[i]);
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// First node whose forward value was not finite, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.abs());
        let rg = self.rg(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel().max(1) as f64);
        let s = self.sum(x);
        self.scalar_mul(s, T::one() / n)
    }

    /// 2-D cross-correlation with zero padding, NCHW input and
    /// `out x in x kh x kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        if geom.out_len(xs[2], ks[2]).is_none() || geom.out_len(xs[3], ks[3]).is_none() {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {ks:?} with {geom:?} does not fit input {xs:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &ks[..1]));
            }
        }
        let v = conv::forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            geom,
        );
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Matrix product over the last two axes. Operands are rank 2 or
    /// rank 3 with identical batch size; `ta`/`tb` transpose an operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geom = matmul_geom(&sa, &sb, ta, tb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([geom.m, geom.n]);
        let mut out = Tensor::zeros(&out_shape);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..geom.batch {
                let ma = geom.a_ref(va, i, ta);
                let mb = geom.b_ref(vb, i, tb);
                gemm(ma, mb, &mut od[i * geom.m * geom.n..(i + 1) * geom.m * geom.n], T::zero());
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Softmax along `axis` (max-shifted for stability).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        let v = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let v = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let v = Tensor::from_vec(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Slice { x, axis, start }, rg))
    }

    /// Adjoint of [`Graph::slice`]: embeds `x` at `start` along `axis` in a
    /// zero tensor whose extent along that axis is `total`.
    pub fn place(&mut self, x: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + shape[axis] > total {
            return Err(Error::invalid(
                "place",
                format!("cannot place {shape:?} at {start} on axis {axis} within {total}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = total;
        let mut out = Tensor::zeros(&out_shape);
        let src = self.value(x).data();
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out.data_mut()[dst..dst + len * inner]
                .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Place { x, axis, start }, rg))
    }

    /// Bilinear x2 upsampling of the two trailing axes, half-pixel
    /// (align-corners = false) convention.
    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] == 0 || shape[shape.len() - 2] == 0 {
            return Err(Error::invalid(
                "bilinear_upsample2x",
                format!("need non-empty spatial dims, got {shape:?}"),
            ));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[..r - 2].iter().product();
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, wy0, wy1) in &ty {
                let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
                for &(x0, x1, wx0, wx1) in &tx {
                    let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                    out.push(
                        wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                            + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]),
                    );
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[r - 2] = 2 * h;
        out_shape[r - 1] = 2 * w;
        let v = Tensor::from_vec(&out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Upsample2x(x), rg))
    }

    /// Mean absolute difference over the entries where `mask` is true (all
    /// entries when `mask` is `None`). An all-false mask yields 0 and a
    /// recorded warning.
    pub fn l1_mean(&mut self, a: Var, b: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.same_shape("l1_mean", a, b)?;
        let n = self.value(a).numel();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("l1_mean mask", self.shape(a), &[m.len()]));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut total = T::zero();
        let mut count = 0usize;
        for i in (0..n).filter(|&i| keep(i)) {
            total += (va[i] - vb[i]).abs();
            count += 1;
        }
        let value = if count == 0 {
            let msg = "l1_mean: empty mask, returning 0".to_string();
            warn!("{msg}");
            self.warnings.push(msg);
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::L1Mean {
                a,
                b,
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_finite()?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.vjp(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `f`'s contribution into the gradient slot of `v`, if `v`
    /// participates in differentiation.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot =
            grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn vjp(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += *g));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += *g));
                self.acc(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d -= *g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += *g * *y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(va) {
                        *d += *g * *x;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += *g * *s));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(vx) {
                        if *x > T::zero() {
                            *d += *g;
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(vx) {
                        if *x > T::zero() {
                            *d += *g;
                        } else if *x < T::zero() {
                            *d -= *g;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut take = |v: Var| -> Option<Tensor<T>> {
                    self.nodes[v.0].requires_grad.then(|| {
                        grads[v.0]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
                    })
                };
                let mut dx = take(*input);
                let mut dk = take(*kernel);
                let mut db = bias.and_then(&mut take);
                conv::backward(
                    self.value(*input),
                    self.value(*kernel),
                    *geom,
                    g,
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(Some(*input), dx), (Some(*kernel), dk), (*bias, db)] {
                    if let (Some(v), Some(t)) = (v, t) {
                        grads[v.0] = Some(t);
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let geom = matmul_geom(sa, sb, *ta, *tb).expect("validated in forward");
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (m, n) = (geom.m, geom.n);
                self.acc(grads, *a, |d| {
                    for i in 0..geom.batch {
                        let dc = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let ob = geom.b_ref(vb, i, *tb);
                        let dst = &mut d[i * geom.a_len..(i + 1) * geom.a_len];
                        if *ta {
                            gemm(ob, dc.t(), dst, T::one());
                        } else {
                            gemm(dc, ob.t(), dst, T::one());
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..geom.batch {
                        let dc = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let oa = geom.a_ref(va, i, *ta);
                        let dst = &mut d[i * geom.b_len..(i + 1) * geom.b_len];
                        if *tb {
                            gemm(dc.t(), oa, dst, T::one());
                        } else {
                            gemm(oa.t(), dc, dst, T::one());
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += *g));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: T = (0..len).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                d[idx(k)] += y[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.acc(grads, p, |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (dst, g) in d[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&gd[src..src + len * inner])
                            {
                                *dst += *g;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        for (d, g) in d[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&gd[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += *g;
                        }
                    }
                });
            }
            Op::Place { x, axis, start } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let len = self.shape(*x)[*axis];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let src = (o * total + start) * inner;
                        for (d, g) in d[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&gd[src..src + len * inner])
                        {
                            *d += *g;
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let planes: usize = s[..r - 2].iter().product();
                let (ty, tx) = (upsample_taps(h), upsample_taps(w));
                self.acc(grads, *x, |d| {
                    let mut k = 0;
                    for p in 0..planes {
                        let plane = &mut d[p * h * w..(p + 1) * h * w];
                        for &(y0, y1, wy0, wy1) in &ty {
                            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
                            for &(x0, x1, wx0, wx1) in &tx {
                                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                                let gv = gd[k];
                                k += 1;
                                plane[y0 * w + x0] += gv * wy0 * wx0;
                                plane[y0 * w + x1] += gv * wy0 * wx1;
                                plane[y1 * w + x0] += gv * wy1 * wx0;
                                plane[y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::L1Mean { a, b, mask, count } => {
                if *count == 0 {
                    return;
                }
                let scale = gd[0] / T::lit(*count as f64);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let sign = |i: usize| -> T {
                    if mask.as_ref().is_some_and(|m| !m[i]) {
                        return T::zero();
                    }
                    let diff = va[i] - vb[i];
                    if diff > T::zero() {
                        scale
                    } else if diff < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                self.acc(grads, *a, |d| {
                    d.iter_mut().enumerate().for_each(|(i, d)| *d += sign(i))
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().enumerate().for_each(|(i, d)| *d -= sign(i))
                });
            }
        }
    }
}

struct MatMulGeom {
    batch: usize,
    m: usize,
    n: usize,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
    a_len: usize,
    b_len: usize,
}

impl MatMulGeom {
    fn a_ref<'a, T: Real>(&self, data: &'a [T], i: usize, ta: bool) -> MatRef<'a, T> {
        let m = MatRef::new(&data[i * self.a_len..(i + 1) * self.a_len], self.a_rows, self.a_cols);
        if ta {
            m.t()
        } else {
            m
        }
    }

    fn b_ref<'a, T: Real>(&self, data: &'a [T], i: usize, tb: bool) -> MatRef<'a, T> {
        let m = MatRef::new(&data[i * self.b_len..(i + 1) * self.b_len], self.b_rows, self.b_cols);
        if tb {
            m.t()
        } else {
            m
        }
    }
}

fn matmul_geom(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Option<MatMulGeom> {
    if sa.len() != sb.len() || !(2..=3).contains(&sa.len()) {
        return None;
    }
    let r = sa.len();
    if sa[..r - 2] != sb[..r - 2] {
        return None;
    }
    let batch = sa[..r - 2].iter().product();
    let (a_rows, a_cols) = (sa[r - 2], sa[r - 1]);
    let (b_rows, b_cols) = (sb[r - 2], sb[r - 1]);
    let (m, ka) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    (ka == kb).then_some(MatMulGeom {
        batch,
        m,
        n,
        a_rows,
        a_cols,
        b_rows,
        b_cols,
        a_len: a_rows * a_cols,
        b_len: b_rows * b_cols,
    })
}
