//! Reverse-mode automatic differentiation over a small fixed operator set.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs already
//! exist, so node order is a topological order and [`Graph::backward`] is a
//! single reverse sweep. Values stay on the tape until [`Graph::clear`].

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    GlobalAvgPool(Var),
    SoftShrink(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast {
        input: Var,
        gate: Var,
    },
    ConcatChannels(Var, Var),
    Sum(Var),
    L1Loss {
        pred: Var,
        target: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::GlobalAvgPool(a)
            | Op::SoftShrink(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sum(a) => {
                vec![a]
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => vec![a, b],
            Op::MulBroadcast { input, gate } => vec![input, gate],
            Op::L1Loss { pred, target } => vec![pred, target],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, releasing saved activations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Forgets leaf gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        debug_assert!(
            value.all_finite() || inputs.iter().any(|i| !self.nodes[i.0].value.all_finite()),
            "non-finite output from finite inputs in {:?}",
            std::mem::discriminant(&op)
        );
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, op))
    }

    /// Same-padded 2-D convolution of an NCHW input with an `out×in×k×k`
    /// weight, optional bias of length `out`, and tap spacing `dilation`.
    /// Padding is `dilation·(k−1)/2`, so output H×W equals input H×W.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (oc, ic, kh, kw) = self.value(weight).dims4()?;
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if ic != c {
            return Err(Error::ChannelMismatch {
                expected: ic,
                actual: c,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [oc] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?} for {oc} output channels",
                    self.shape(b)
                )));
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("empty spatial extent".into()));
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            out_ch: oc,
            height: h,
            width: w,
            kernel: kh,
            dilation,
        };
        let data = conv::forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[n, oc, h, w], data)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Spatial mean per channel: `N×C×H×W → N×C×1×1`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(
                "global average pool over empty spatial extent".into(),
            ));
        }
        let plane = h * w;
        let scale = T::one() / T::from_f64(plane as f64);
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(input)))
    }

    /// `sign(v)·max(|v| − λ, 0)` elementwise.
    pub fn soft_shrink(&mut self, input: Var, lambda: T) -> Result<Var> {
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "soft-shrink threshold must be non-negative, got {lambda:?}"
            )));
        }
        Ok(self.unary(
            input,
            move |v| soft_shrink_scalar(v, lambda),
            Op::SoftShrink(input, lambda),
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, sigmoid_scalar, Op::Sigmoid(input))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(
            input,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(input),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Scales each channel map of an `N×C×H×W` input by the matching entry of
    /// an `N×C×1×1` gate.
    pub fn mul_broadcast(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(gate) != [n, c, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "gate shape {:?} for input {:?}",
                self.shape(gate),
                self.shape(input)
            )));
        }
        let plane = h * w;
        let g = self.value(gate).data();
        let data = self
            .value(input)
            .data()
            .chunks(plane.max(1))
            .zip(g)
            .flat_map(|(ch, &s)| ch.iter().map(move |&v| v * s))
            .collect();
        let value = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(value, Op::MulBroadcast { input, gate }))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (la, lb) = (ca * ha * wa, cb * hb * wb);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (la + lb));
        for i in 0..na {
            data.extend_from_slice(&va[i * la..(i + 1) * la]);
            data.extend_from_slice(&vb[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::new(&[na, ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::ConcatChannels(a, b)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input))
    }

    /// Mean absolute difference over every element of the batch.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1_loss")?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        if p.is_empty() {
            return Err(Error::ShapeMismatch("l1_loss over empty tensors".into()));
        }
        let total: T = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum();
        let value = Tensor::scalar(total / T::from_f64(p.len() as f64));
        Ok(self.push(value, Op::L1Loss { pred, target }))
    }

    /// Populates `grad` on every leaf that requires one. Leaves with no path
    /// to `loss` get a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(&shape, g)?);
                continue;
            }
            for (input, grad) in self.local_grads(i, &g) {
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &v)| *a = *a + v),
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradients of node `i` with respect to each of its inputs that
    /// requires one, given the gradient `g` flowing into its output.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = conv::backward(
                    val(input),
                    val(weight),
                    g,
                    &geom,
                    needs(input),
                    needs(weight),
                    bias.is_some_and(needs),
                );
                out.extend(grads.input.map(|d| (input, d)));
                out.extend(grads.weight.map(|d| (weight, d)));
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((b, d));
                }
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = self.nodes[a.0].value.dims4().expect("rank-4");
                let plane = h * w;
                let scale = T::one() / T::from_f64(plane as f64);
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * scale, plane))
                    .collect();
                out.push((a, d));
            }
            Op::SoftShrink(a, lambda) => {
                let d = val(a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x.abs() > lambda { gv } else { T::zero() })
                    .collect();
                out.push((a, d));
            }
            Op::Sigmoid(a) => {
                let s = node.value.data();
                let d = s
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                out.push((a, d));
            }
            Op::Relu(a) => {
                let d = val(a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((a, d));
            }
            Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    out.push((b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&gv, &y)| gv * y).collect()));
                }
                if needs(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&gv, &x)| gv * x).collect()));
                }
            }
            Op::MulBroadcast { input, gate } => {
                let (_, _, h, w) = self.nodes[input.0].value.dims4().expect("rank-4");
                let plane = (h * w).max(1);
                let gate_v = val(gate);
                if needs(input) {
                    let d = g
                        .chunks(plane)
                        .zip(gate_v)
                        .flat_map(|(ch, &s)| ch.iter().map(move |&gv| gv * s))
                        .collect();
                    out.push((input, d));
                }
                if needs(gate) {
                    let d = g
                        .chunks(plane)
                        .zip(val(input).chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&gv, &x)| gv * x).sum())
                        .collect();
                    out.push((gate, d));
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.nodes[a.0].value.dims4().expect("rank-4");
                let cb = self.nodes[b.0].value.dims4().expect("rank-4").1;
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for item in g.chunks(la + lb) {
                    da.extend_from_slice(&item[..la]);
                    db.extend_from_slice(&item[la..]);
                }
                if needs(a) {
                    out.push((a, da));
                }
                if needs(b) {
                    out.push((b, db));
                }
            }
            Op::Sum(a) => {
                out.push((a, vec![g[0]; val(a).len()]));
            }
            Op::L1Loss { pred, target } => {
                let p = val(pred);
                let t = val(target);
                let scale = g[0] / T::from_f64(p.len() as f64);
                let d: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if needs(target) {
                    out.push((target, d.iter().map(|&v| -v).collect()));
                }
                if needs(pred) {
                    out.push((pred, d));
                }
            }
        }
        out
    }
}

pub(crate) fn soft_shrink_scalar<T: Scalar>(v: T, lambda: T) -> T {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so neither branch overflows exp.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
