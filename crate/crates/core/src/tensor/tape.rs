use super::{elementwise, linalg, nn, reduce, spatial, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(super) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Complement(Var),
    LeakyRelu(Var, T),
    Sum(Var),
    Mean(Var),
    RowMax { input: Var, argmax: Vec<usize> },
    ColMax { input: Var, argmax: Vec<usize> },
    Outer(Var, Var),
    Softmax { input: Var, axis: usize },
    ChannelCosine { a: Var, b: Var },
    MatMul(Var, Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Upsample(Var),
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    Deconv2x2 { input: Var, weight: Var, bias: Var },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    SoftDice { pred: Var, target: Var, eps: T },
}

#[derive(Debug)]
pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op<T>,
    pub(super) requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it. [`Tape::backward`] walks the record once in reverse. A tape
/// created with [`Tape::detached`] evaluates values but records no backward
/// information, and nothing on it ever requires a gradient.
#[derive(Debug)]
pub struct Tape<T> {
    pub(super) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    pub fn detached() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. On a detached tape `requires_grad` is ignored.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad matches value shape")
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj = Adjoints {
            bufs: vec![None; loss.0 + 1],
        };
        adj.bufs[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj.bufs[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &mut self.grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            backprop(&self.nodes, &node.op, &node.value, &g, &mut adj);
        }
        Ok(())
    }
}

pub(super) struct Adjoints<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Adjoints<T> {
    /// Gradient buffer of `v`, or `None` when `v` takes no gradient.
    pub(super) fn slot<'a>(&'a mut self, nodes: &[Node<T>], v: Var) -> Option<&'a mut [T]> {
        let node = &nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    adj: &mut Adjoints<T>,
) {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            elementwise::accumulate_broadcast(adj.slot(nodes, *a), g, |_, gk| gk);
            elementwise::accumulate_broadcast(adj.slot(nodes, *b), g, |_, gk| gk);
        }
        Op::Sub(a, b) => {
            elementwise::accumulate_broadcast(adj.slot(nodes, *a), g, |_, gk| gk);
            elementwise::accumulate_broadcast(adj.slot(nodes, *b), g, |_, gk| -gk);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let pick = |x: &[T], k: usize| if x.len() == 1 { x[0] } else { x[k] };
            elementwise::accumulate_broadcast(adj.slot(nodes, *a), g, |k, gk| gk * pick(bv, k));
            elementwise::accumulate_broadcast(adj.slot(nodes, *b), g, |k, gk| gk * pick(av, k));
        }
        Op::Scale(a, c) => {
            if let Some(s) = adj.slot(nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, &gk)| *s = *s + gk * *c);
            }
        }
        Op::AddScalar(a) => {
            if let Some(s) = adj.slot(nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, &gk)| *s = *s + gk);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(s) = adj.slot(nodes, *a) {
                for ((s, &gk), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s = *s + gk * y * (T::one() - y);
                }
            }
        }
        Op::Complement(a) => {
            if let Some(s) = adj.slot(nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, &gk)| *s = *s - gk);
            }
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(a).data();
            if let Some(s) = adj.slot(nodes, *a) {
                for ((s, &gk), &xk) in s.iter_mut().zip(g).zip(x) {
                    *s = *s + if xk > T::zero() { gk } else { gk * *slope };
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = adj.slot(nodes, *a) {
                s.iter_mut().for_each(|s| *s = *s + g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = adj.slot(nodes, *a) {
                let gk = g[0] / T::lit(s.len() as f64);
                s.iter_mut().for_each(|s| *s = *s + gk);
            }
        }
        Op::RowMax { input, argmax } | Op::ColMax { input, argmax } => {
            if let Some(s) = adj.slot(nodes, *input) {
                for (&idx, &gk) in argmax.iter().zip(g) {
                    s[idx] = s[idx] + gk;
                }
            }
        }
        Op::Outer(o, v) => {
            let (ov, vv) = (val(o).data(), val(v).data());
            let w = vv.len();
            if let Some(s) = adj.slot(nodes, *o) {
                for (i, si) in s.iter_mut().enumerate() {
                    let row = &g[i * w..(i + 1) * w];
                    *si = *si + row.iter().zip(vv).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
            if let Some(s) = adj.slot(nodes, *v) {
                for (i, &oi) in ov.iter().enumerate() {
                    let row = &g[i * w..(i + 1) * w];
                    for (sj, &gj) in s.iter_mut().zip(row) {
                        *sj = *sj + gj * oi;
                    }
                }
            }
        }
        Op::Softmax { input, axis } => {
            if let Some(s) = adj.slot(nodes, *input) {
                reduce::softmax_backward(out, *axis, g, s);
            }
        }
        Op::ChannelCosine { a, b } => {
            let (ga, gb) = reduce::channel_cosine_backward(val(a), val(b), g);
            if let Some(s) = adj.slot(nodes, *a) {
                s.iter_mut().zip(&ga).for_each(|(s, &x)| *s = *s + x);
            }
            if let Some(s) = adj.slot(nodes, *b) {
                s.iter_mut().zip(&gb).for_each(|(s, &x)| *s = *s + x);
            }
        }
        Op::MatMul(a, b) => {
            if let Some(s) = adj.slot(nodes, *a) {
                linalg::matmul_backward_lhs(val(b), g, s);
            }
            if let Some(s) = adj.slot(nodes, *b) {
                linalg::matmul_backward_rhs(val(a), g, s);
            }
        }
        Op::Reshape(a) => {
            if let Some(s) = adj.slot(nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, &gk)| *s = *s + gk);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(p).len();
                if let Some(s) = adj.slot(nodes, *p) {
                    s.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(s, &gk)| *s = *s + gk);
                }
                offset += n;
            }
        }
        Op::Upsample(a) => {
            if let Some(s) = adj.slot(nodes, *a) {
                spatial::bilinear_backward(val(a).shape(), out.shape(), g, s);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let geo = nn::ConvGeometry::new(val(input).shape(), val(weight).shape(), *stride, *pad)
                .expect("validated in forward");
            if let Some(s) = adj.slot(nodes, *input) {
                nn::conv2d_backward_input(&geo, val(weight).data(), g, s);
            }
            if let Some(s) = adj.slot(nodes, *weight) {
                nn::conv2d_backward_weight(&geo, val(input).data(), g, s);
            }
            if let Some(s) = adj.slot(nodes, *bias) {
                nn::channel_sum_into(g, s);
            }
        }
        Op::Deconv2x2 {
            input,
            weight,
            bias,
        } => {
            let (x, w) = (val(input), val(weight));
            if let Some(s) = adj.slot(nodes, *input) {
                nn::deconv_backward_input(x.shape(), w.shape(), w.data(), g, s);
            }
            if let Some(s) = adj.slot(nodes, *weight) {
                nn::deconv_backward_weight(x.shape(), w.shape(), x.data(), g, s);
            }
            if let Some(s) = adj.slot(nodes, *bias) {
                nn::channel_sum_into(g, s);
            }
        }
        Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let x = val(input);
            let grads = nn::group_norm_backward(x, val(gamma).data(), *groups, mean, rstd, g);
            if let Some(s) = adj.slot(nodes, *input) {
                s.iter_mut().zip(&grads.input).for_each(|(s, &v)| *s = *s + v);
            }
            if let Some(s) = adj.slot(nodes, *gamma) {
                s.iter_mut().zip(&grads.gamma).for_each(|(s, &v)| *s = *s + v);
            }
            if let Some(s) = adj.slot(nodes, *beta) {
                s.iter_mut().zip(&grads.beta).for_each(|(s, &v)| *s = *s + v);
            }
        }
        Op::SoftDice { pred, target, eps } => {
            let (p, t) = (val(pred).data(), val(target).data());
            let inter: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
            let denom = p.iter().copied().sum::<T>() + t.iter().copied().sum::<T>() + *eps;
            let two = T::lit(2.0);
            let scale = -two * g[0] / (denom * denom);
            if let Some(s) = adj.slot(nodes, *pred) {
                for (s, &tk) in s.iter_mut().zip(t) {
                    *s = *s + scale * (tk * denom - inter);
                }
            }
            if let Some(s) = adj.slot(nodes, *target) {
                for (s, &pk) in s.iter_mut().zip(p) {
                    *s = *s + scale * (pk * denom - inter);
                }
            }
        }
    }
}
