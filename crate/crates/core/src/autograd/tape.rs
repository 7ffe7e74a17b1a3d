use crate::autograd::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    HardSigmoid(Var),
    ClampMax(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so every op's inputs precede it;
/// [`Tape::backward`] walks the nodes in exact reverse order. Leaf gradients
/// accumulate across backward calls until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("needs spatial axes, got {shape:?}")));
    }
    let n = shape.len();
    let planes = shape[..n - 2].iter().product();
    Ok((planes, shape[n - 2], shape[n - 1]))
}

fn hard_sigmoid<T: Scalar>(x: T) -> T {
    let y = x.as_f64() * 0.2 + 0.5;
    T::from_f64_lossy(y.clamp(0.0, 1.0))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va.shape(), vb.shape())?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let va = self.value(a);
        let value = Tensor::from_fn(va.shape(), |i| f(va.data()[i]));
        let rg = self.tracked(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = T::from_f64_lossy(factor);
        self.unary(a, |x| x * c, Op::Scale(a, factor))
    }

    /// `max(x, 0)`; NaN propagates rather than being clipped away.
    pub fn relu(&mut self, a: Var) -> Var {
        #[allow(clippy::eq_op)]
        self.unary(a, |x| if x > T::zero() || x != x { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// `clip(0.2·x + 0.5, 0, 1)`.
    pub fn hard_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, hard_sigmoid, Op::HardSigmoid(a))
    }

    /// `min(x, c)`; gradient passes where `x < c`. NaN propagates.
    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        let cap = T::from_f64_lossy(c);
        #[allow(clippy::eq_op)]
        self.unary(a, |x| if x < cap || x != x { x } else { cap }, Op::ClampMax(a, c))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.tracked(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat(&[a, b], 1)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(
            value,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Same-padded 2-D convolution: input `[B,Cin,H,W]`, weight
    /// `[Cout,Cin,k,k]` with odd `k`, bias `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} and weight {ws:?} must be rank 4"),
            ));
        }
        if ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square and odd, got {ws:?}"),
            ));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bs:?} does not match {} output channels", ws[0]),
            ));
        }
        if xs[2] == 0 || xs[3] == 0 {
            return Err(Error::shape("conv2d", "empty spatial extent"));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![xs[0], ws[0], xs[2], xs[3]], data)?;
        let rg = self.tracked(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping 2×2 max pooling; odd spatial sizes are rejected.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (planes, h, w) = spatial("max_pool2", &shape)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("spatial size {h}x{w} is not even"),
            ));
        }
        let (data, argmax) = kernels::max_pool2_forward(self.value(a).data(), planes, h, w);
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape[n - 2] = h / 2;
        out_shape[n - 1] = w / 2;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(value, Op::MaxPool2 { input: a, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by 2 on the last two axes.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (planes, h, w) = spatial("upsample2", &shape)?;
        let data = kernels::upsample2_forward(self.value(a).data(), planes, h, w);
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape[n - 2] = 2 * h;
        out_shape[n - 1] = 2 * w;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(value, Op::Upsample2(a), rg))
    }

    /// Sum of all elements, accumulated in index order.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse-mode sweep from a scalar `loss`; gradients accumulate on every
    /// leaf created with [`Tape::param`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let op = node.op.clone();
            let emit = |v: Var, d: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(d) {
                            *a = *a + x;
                        }
                    }
                    slot => *slot = Some(d),
                }
            };
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[idx];
                    match &mut node.grad {
                        Some(acc) => {
                            for (a, x) in acc.data_mut().iter_mut().zip(g) {
                                *a = *a + x;
                            }
                        }
                        slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                    }
                }
                Op::Add(a, b) => {
                    emit(a, g.clone(), &mut grads);
                    emit(b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|&x| -x).collect();
                    emit(a, g, &mut grads);
                    emit(b, neg, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    let da = g.iter().zip(vb).map(|(&d, &y)| d * y).collect();
                    let db = g.iter().zip(va).map(|(&d, &x)| d * x).collect();
                    emit(a, da, &mut grads);
                    emit(b, db, &mut grads);
                }
                Op::Scale(a, f) => {
                    let c = T::from_f64_lossy(f);
                    emit(a, g.iter().map(|&d| d * c).collect(), &mut grads);
                }
                Op::Relu(a) => {
                    let x = self.value(a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect();
                    emit(a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.data();
                    let d = g
                        .iter()
                        .zip(y)
                        .map(|(&d, &y)| d * (T::one() - y * y))
                        .collect();
                    emit(a, d, &mut grads);
                }
                Op::HardSigmoid(a) => {
                    let x = self.value(a).data();
                    let slope = T::from_f64_lossy(0.2);
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&d, &x)| {
                            let z = x.as_f64() * 0.2 + 0.5;
                            if z > 0.0 && z < 1.0 {
                                d * slope
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    emit(a, d, &mut grads);
                }
                Op::ClampMax(a, c) => {
                    let x = self.value(a).data();
                    let cap = T::from_f64_lossy(c);
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&d, &x)| if x < cap { d } else { T::zero() })
                        .collect();
                    emit(a, d, &mut grads);
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let (outer, dim, inner) = split_axis(&out_shape, axis);
                    let mut offset = 0;
                    for v in inputs {
                        let len = self.shape(v)[axis];
                        let chunk = len * inner;
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * dim * inner + offset * inner;
                            d.extend_from_slice(&g[base..base + chunk]);
                        }
                        emit(v, d, &mut grads);
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let in_shape = self.shape(input).to_vec();
                    let len = self.nodes[idx].value.shape()[axis];
                    let (outer, dim, inner) = split_axis(&in_shape, axis);
                    let mut d = vec![T::zero(); in_shape.iter().product()];
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    emit(input, d, &mut grads);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let want = (
                        self.requires_grad(input),
                        self.requires_grad(weight),
                        self.requires_grad(bias),
                    );
                    let cg = kernels::conv2d_backward(
                        &geom,
                        self.value(input).data(),
                        self.value(weight).data(),
                        &g,
                        want,
                    );
                    if let Some(d) = cg.input {
                        emit(input, d, &mut grads);
                    }
                    if let Some(d) = cg.weight {
                        emit(weight, d, &mut grads);
                    }
                    if let Some(d) = cg.bias {
                        emit(bias, d, &mut grads);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut d = vec![T::zero(); self.value(input).len()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        d[src] = d[src] + gv;
                    }
                    emit(input, d, &mut grads);
                }
                Op::Upsample2(a) => {
                    let (planes, h, w) = spatial("upsample2", self.shape(a))?;
                    emit(a, kernels::upsample2_backward(&g, planes, h, w), &mut grads);
                }
                Op::Sum(a) => {
                    let n = self.value(a).len();
                    emit(a, vec![g[0]; n], &mut grads);
                }
            }
        }
        Ok(())
    }
}
