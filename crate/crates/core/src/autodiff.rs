//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents were pushed earlier, so node order is already a topological order
//! and [`Graph::backward`] simply walks the tape in reverse.
//!
//! ```
//! use osegnet::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_slice(&[1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// Coarse operation families, used to label gradient checks and to inject
/// faults into a backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Elementwise,
    Reduce,
    Activation,
    PowInt,
    PowerExpand,
    Conv2d,
    ConvTranspose2d,
    BatchNorm,
    Dice,
    Focal,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Elementwise(ElementwiseOp, Var, Var),
    Scale(Var, f32),
    Reduce(ReduceOp, Var),
    Activation(Activation, Var),
    PowInt(Var, u32),
    PowerExpand(Var, usize),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Dice {
        pred: Var,
        target: Tensor,
        smooth: f64,
    },
    Focal {
        pred: Var,
        target: Tensor,
        gamma: f64,
        alpha: f64,
        clip: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Elementwise(..) | Op::Scale(..) => OpKind::Elementwise,
            Op::Reduce(..) => OpKind::Reduce,
            Op::Activation(..) => OpKind::Activation,
            Op::PowInt(..) => OpKind::PowInt,
            Op::PowerExpand(..) => OpKind::PowerExpand,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dice { .. } => OpKind::Dice,
            Op::Focal { .. } => OpKind::Focal,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Scalar value carried at `f64` precision by reductions and losses.
    precise: Option<f64>,
}

/// Computation tape with reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    fault: Option<(OpKind, f32)>,
}

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

    /// Scales every gradient emitted by operations of `kind` by `factor`.
    /// Only meant for negative controls of gradient checks.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f32) {
        self.fault = Some((kind, factor));
    }

    fn push(&mut self, value: Tensor, op: Op, precise: Option<f64>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Elementwise(_, a, b) => self.req(*a) || self.req(*b),
            Op::Scale(a, _)
            | Op::Reduce(_, a)
            | Op::Activation(_, a)
            | Op::PowInt(a, _)
            | Op::PowerExpand(a, _) => self.req(*a),
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                ..
            } => self.req(*input) || self.req(*kernel) || self.req(*bias),
            Op::BatchNorm {
                input, gamma, beta, ..
            } => self.req(*input) || self.req(*gamma) || self.req(*beta),
            Op::Dice { pred, .. } | Op::Focal { pred, .. } => self.req(*pred),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            precise,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, None);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v`, at `f64` precision when the producing op kept it.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.precise.unwrap_or_else(|| node.value.item() as f64)
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to the leaf
    /// `v`. Leaves the loss does not depend on get an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb && !self.value(a).is_scalar() && !self.value(b).is_scalar() {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise arithmetic on equal shapes; a one-element operand is
    /// broadcast.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise", a, b)?;
        let f = match op {
            ElementwiseOp::Add => |x: f32, y: f32| x + y,
            ElementwiseOp::Sub => |x: f32, y: f32| x - y,
            ElementwiseOp::Mul => |x: f32, y: f32| x * y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, f)
        } else if vb.is_scalar() {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else {
            let s = va.item();
            vb.map(|y| f(s, y))
        };
        let precise = match (op, self.nodes[a.0].precise, self.nodes[b.0].precise) {
            (ElementwiseOp::Add, Some(x), Some(y)) => Some(x + y),
            (ElementwiseOp::Sub, Some(x), Some(y)) => Some(x - y),
            (ElementwiseOp::Mul, Some(x), Some(y)) => Some(x * y),
            _ => None,
        };
        Ok(self.push(value, Op::Elementwise(op, a, b), precise))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let precise = self.nodes[a.0].precise.map(|p| p * factor as f64);
        self.push(value, Op::Scale(a, factor), precise)
    }

    /// Sum or mean of all elements, accumulated row-major in `f64`.
    pub fn reduce(&mut self, op: ReduceOp, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum_f64();
        let exact = match op {
            ReduceOp::Sum => s,
            ReduceOp::Mean => s / t.len() as f64,
        };
        self.push(Tensor::scalar(exact as f32), Op::Reduce(op, a), Some(exact))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a)
    }

    pub fn activate(&mut self, act: Activation, a: Var) -> Var {
        let value = match act {
            Activation::Tanh => self.value(a).map(f32::tanh),
            Activation::Sigmoid => self.value(a).map(sigmoid),
        };
        self.push(value, Op::Activation(act, a), None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activate(Activation::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activate(Activation::Sigmoid, a)
    }

    pub fn pow_int(&mut self, a: Var, q: u32) -> Result<Var> {
        let value = kernels::pow_int(self.value(a), q)?;
        Ok(self.push(value, Op::PowInt(a, q), None))
    }

    pub fn power_expand(&mut self, a: Var, q: usize) -> Result<Var> {
        let value = kernels::power_expand(self.value(a), q)?;
        Ok(self.push(value, Op::PowerExpand(a, q), None))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            None,
        ))
    }

    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let value = kernels::conv2d_transpose(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
        )?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
            },
            None,
        ))
    }

    /// Per-channel normalization of an `N×C×H×W` tensor.
    ///
    /// With `running = None` the batch statistics over `N×H×W` are used and
    /// returned; otherwise the given `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor, &Tensor)>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        const OP: &str = "batch_norm";
        let x = self.value(input);
        let [n, c, h, w] = x.dims4(OP)?;
        for (name, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.len() != c {
                return Err(Error::shape(
                    OP,
                    format!("{name} has {} entries for {c} channels", t.len()),
                ));
            }
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let (mean, var) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape(OP, "running statistics do not match channels"));
                }
                (
                    rm.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    rv.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                )
            }
            None => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += x.data()[off..off + plane]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        ss += x.data()[off..off + plane]
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|&v| 1.0 / (v.max(0.0) + eps).sqrt())
            .collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let scale = gv[ch] as f64 * inv_std[ch];
                let shift = bv[ch] as f64 - mean[ch] * scale;
                for (o, &v) in out[off..off + plane]
                    .iter_mut()
                    .zip(&x.data()[off..off + plane])
                {
                    *o = (v as f64 * scale + shift) as f32;
                }
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let training = running.is_none();
        let stats = training.then(|| BatchStats {
            mean: mean.clone(),
            var,
        });
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
            None,
        );
        Ok((var, stats))
    }

    /// Batch-mean soft dice loss against a binary `target` of the same shape.
    pub fn dice_loss(&mut self, target: &Tensor, pred: Var, smooth: f64) -> Result<Var> {
        let q = self.value(pred);
        check_loss_inputs("dice_loss", target, q)?;
        let n = q.shape()[0];
        let per = q.len() / n;
        let mut total = 0.0f64;
        for b in 0..n {
            let (inter, union) = dice_terms(
                &target.data()[b * per..(b + 1) * per],
                &q.data()[b * per..(b + 1) * per],
            );
            total += 1.0 - (2.0 * inter + smooth) / (union + smooth);
        }
        let loss = total / n as f64;
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::Dice {
                pred,
                target: target.clone(),
                smooth,
            },
            Some(loss),
        ))
    }

    /// Pixel-mean binary focal loss; `pred` is clipped to `[clip, 1 - clip]`.
    pub fn focal_loss(
        &mut self,
        target: &Tensor,
        pred: Var,
        gamma: f64,
        alpha: f64,
        clip: f64,
    ) -> Result<Var> {
        let q = self.value(pred);
        check_loss_inputs("focal_loss", target, q)?;
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::invalid("gamma", format!("{gamma} must be ≥ 0")));
        }
        let total: f64 = target
            .data()
            .iter()
            .zip(q.data())
            .map(|(&p, &q)| focal_term(p as f64, (q as f64).clamp(clip, 1.0 - clip), gamma, alpha))
            .sum();
        let loss = total / q.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::Focal {
                pred,
                target: target.clone(),
                gamma,
                alpha,
                clip,
            },
            Some(loss),
        ))
    }

    /// Back-propagates from the scalar `loss`, leaving gradients on every
    /// leaf created with [`Graph::leaf`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(&shape));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.node_backward(node, &g)?;
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    for (_, t) in &mut contributions {
                        *t = t.map(|x| x * factor);
                    }
                }
            }
            for (parent, t) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Elementwise(op, a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (ga, gb) = match op {
                    ElementwiseOp::Add => (g.clone(), g.clone()),
                    ElementwiseOp::Sub => (g.clone(), g.map(|x| -x)),
                    ElementwiseOp::Mul => (mul_bcast(g, vb), mul_bcast(g, va)),
                };
                vec![
                    (*a, unbroadcast(ga, va.shape())),
                    (*b, unbroadcast(gb, vb.shape())),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Reduce(op, a) => {
                let va = val(*a);
                let s = match op {
                    ReduceOp::Sum => g.item(),
                    ReduceOp::Mean => (g.item() as f64 / va.len() as f64) as f32,
                };
                vec![(*a, Tensor::full(va.shape(), s))]
            }
            Op::Activation(act, a) => {
                let y = &node.value;
                let d = match act {
                    Activation::Tanh => y.zip_map(g, |y, g| g * (1.0 - y * y)),
                    Activation::Sigmoid => y.zip_map(g, |y, g| g * y * (1.0 - y)),
                };
                vec![(*a, d)]
            }
            Op::PowInt(a, q) => vec![(*a, kernels::pow_int_backward(val(*a), *q, g))],
            Op::PowerExpand(a, q) => vec![(*a, kernels::power_expand_backward(val(*a), *q, g))],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let gr = kernels::conv2d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    *stride,
                    *padding,
                    need(*input),
                )?;
                let mut v = vec![(*kernel, gr.kernel), (*bias, gr.bias)];
                if let Some(dx) = gr.input {
                    v.push((*input, dx));
                }
                v
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let gr = kernels::conv2d_transpose_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    *stride,
                    need(*input),
                )?;
                let mut v = vec![(*kernel, gr.kernel), (*bias, gr.bias)];
                if let Some(dx) = gr.input {
                    v.push((*input, dx));
                }
                v
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => batch_norm_backward(
                val(*input),
                val(*gamma),
                g,
                mean,
                inv_std,
                *training,
                (*input, *gamma, *beta),
            )?,
            Op::Dice {
                pred,
                target,
                smooth,
            } => {
                let q = val(*pred);
                let n = q.shape()[0];
                let per = q.len() / n;
                let scale = g.item() as f64 / n as f64;
                let mut d = vec![0.0f32; q.len()];
                for b in 0..n {
                    let p_img = &target.data()[b * per..(b + 1) * per];
                    let q_img = &q.data()[b * per..(b + 1) * per];
                    let (inter, union) = dice_terms(p_img, q_img);
                    let num = 2.0 * inter + smooth;
                    let den = union + smooth;
                    for (i, &p) in p_img.iter().enumerate() {
                        let grad = -(2.0 * p as f64 * den - num) / (den * den);
                        d[b * per + i] = (grad * scale) as f32;
                    }
                }
                vec![(*pred, Tensor::new(q.shape(), d)?)]
            }
            Op::Focal {
                pred,
                target,
                gamma,
                alpha,
                clip,
            } => {
                let q = val(*pred);
                let scale = g.item() as f64 / q.len() as f64;
                let d = target.zip_map(q, |p, q| {
                    let q = q as f64;
                    if q < *clip || q > 1.0 - *clip {
                        0.0
                    } else {
                        (focal_term_grad(p as f64, q, *gamma, *alpha) * scale) as f32
                    }
                });
                vec![(*pred, d)]
            }
        };
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mul_bcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape() == g.shape() {
        g.zip_map(other, |g, o| g * o)
    } else {
        let s = other.item();
        g.map(|g| g * s)
    }
}

/// Folds a gradient back onto a broadcast scalar operand.
fn unbroadcast(grad: Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        grad
    } else {
        Tensor::full(shape, grad.sum_f64() as f32)
    }
}

fn check_loss_inputs(op: &'static str, target: &Tensor, pred: &Tensor) -> Result<()> {
    if target.shape() != pred.shape() {
        return Err(Error::shape(
            op,
            format!(
                "target {:?} vs prediction {:?}",
                target.shape(),
                pred.shape()
            ),
        ));
    }
    if target.data().iter().any(|&p| p != 0.0 && p != 1.0) {
        return Err(Error::invalid("target", "ground-truth mask must be binary"));
    }
    Ok(())
}

/// `(Σ p·q, Σ p + Σ q)` in `f64`.
fn dice_terms(p: &[f32], q: &[f32]) -> (f64, f64) {
    let mut inter = 0.0f64;
    let mut union = 0.0f64;
    for (&p, &q) in p.iter().zip(q) {
        inter += p as f64 * q as f64;
        union += p as f64 + q as f64;
    }
    (inter, union)
}

/// `-α(1-q)^γ p log q - (1-α) q^γ (1-p) log(1-q)`.
pub(crate) fn focal_term(p: f64, q: f64, gamma: f64, alpha: f64) -> f64 {
    -alpha * (1.0 - q).powf(gamma) * p * q.ln()
        - (1.0 - alpha) * q.powf(gamma) * (1.0 - p) * (1.0 - q).ln()
}

fn focal_term_grad(p: f64, q: f64, gamma: f64, alpha: f64) -> f64 {
    let pos = if gamma == 0.0 {
        (1.0 - q).powf(gamma) / q
    } else {
        -gamma * (1.0 - q).powf(gamma - 1.0) * q.ln() + (1.0 - q).powf(gamma) / q
    };
    let neg = if gamma == 0.0 {
        -q.powf(gamma) / (1.0 - q)
    } else {
        gamma * q.powf(gamma - 1.0) * (1.0 - q).ln() - q.powf(gamma) / (1.0 - q)
    };
    -alpha * p * pos - (1.0 - alpha) * (1.0 - p) * neg
}

fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    training: bool,
    (input, gamma_var, beta_var): (Var, Var, Var),
) -> Result<Vec<(Var, Tensor)>> {
    let [n, c, h, w] = x.dims4("batch_norm")?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = vec![0.0f32; x.len()];
    for ch in 0..c {
        let (m, is) = (mean[ch], inv_std[ch]);
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xhat = (x.data()[i] as f64 - m) * is;
                sum_g += g.data()[i] as f64;
                sum_gx += g.data()[i] as f64 * xhat;
            }
        }
        dgamma[ch] = sum_gx as f32;
        dbeta[ch] = sum_g as f32;
        let scale = gamma.data()[ch] as f64 * is;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            #[allow(clippy::needless_range_loop)]
            for i in off..off + plane {
                let gi = g.data()[i] as f64;
                dx[i] = if training {
                    let xhat = (x.data()[i] as f64 - m) * is;
                    (scale * (gi - sum_g / count - xhat * sum_gx / count)) as f32
                } else {
                    (scale * gi) as f32
                };
            }
        }
    }
    Ok(vec![
        (input, Tensor::new(x.shape(), dx)?),
        (gamma_var, Tensor::from_slice(&dgamma)),
        (beta_var, Tensor::from_slice(&dbeta)),
    ])
}
