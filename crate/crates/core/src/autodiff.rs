//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Leaves created with
//! `requires_grad = false` never receive a gradient buffer.

use crate::error::{Error, Result};
use crate::metrics::{soft_dice_loss, soft_dice_loss_backward, SoftDiceTerms};
use crate::norm::{batch_norm_eval, batch_norm_train, batch_norm_train_backward};
use crate::ops::{activation, conv, pool, upsample};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, geom: conv::ConvGeom },
    AddChannelBias { input: NodeId, bias: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    Upsample2 { input: NodeId },
    Relu { input: NodeId },
    Concat { inputs: Vec<NodeId> },
    Softmax { input: NodeId },
    BatchNormTrain { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T> },
    BatchNormEval { input: NodeId, gamma: NodeId, beta: NodeId, centered_scale: Vec<T>, xhat: Vec<T> },
    DiceLoss { probs: NodeId, labels: Vec<u8>, smooth: T, terms: SoftDiceTerms<T> },
    Sum { input: NodeId },
    DotConst { input: NodeId, weights: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::AddChannelBias { input, bias } => vec![*input, *bias],
            Op::BatchNormTrain { input, gamma, beta, .. } | Op::BatchNormEval { input, gamma, beta, .. } => {
                vec![*input, *gamma, *beta]
            }
            Op::Concat { inputs } => inputs.clone(),
            Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input }
            | Op::Relu { input }
            | Op::Softmax { input }
            | Op::Sum { input }
            | Op::DotConst { input, .. } => vec![*input],
            Op::DiceLoss { probs, .. } => vec![*probs],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample_bilinear2",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat_channels",
            Op::Softmax { .. } => "softmax_channels",
            Op::BatchNormTrain { .. } => "bn_train",
            Op::BatchNormEval { .. } => "bn_eval",
            Op::DiceLoss { .. } => "dice_loss",
            Op::Sum { .. } => "sum",
            Op::DotConst { .. } => "dot_const",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Contract(format!("{} produced a non-finite value", op.name())));
        }
        let requires_grad = op.inputs().iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` for frozen leaves or before backward.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Batch mean and variance saved by a train-mode BN node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let [n, cin, h, w] = self.value(input).dims4("conv2d")?;
        let ws = self.value(weight).shape().to_vec();
        let (cout, k) = match ws.as_slice() {
            &[co, ci, kh, kw] if ci == cin && kh == kw && kh % 2 == 1 => (co, kh),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {:?} incompatible with weight {ws:?}", self.value(input).shape()),
                ))
            }
        };
        let geom = conv::ConvGeom { n, cin, cout, h, w, k };
        let out = conv::forward(&geom, self.value(input).data(), self.value(weight).data());
        self.push(Tensor::new(vec![n, cout, h, w], out)?, Op::Conv2d { input, weight, geom })
    }

    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("add_channel_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::shape("add_channel_bias", format!("{c} channels, bias of {}", self.value(bias).numel())));
        }
        let out = activation::add_channel_bias(self.value(input).data(), self.value(bias).data(), n, h * w);
        self.push(Tensor::new(vec![n, c, h, w], out)?, Op::AddChannelBias { input, bias })
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("spatial dims {h}x{w} must be even")));
        }
        let (out, argmax) = pool::maxpool2_forward(self.value(input).data(), n * c, h, w);
        self.push(Tensor::new(vec![n, c, h / 2, w / 2], out)?, Op::MaxPool2 { input, argmax })
    }

    pub fn upsample_bilinear2(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("upsample_bilinear2")?;
        let out = upsample::forward(self.value(input).data(), n * c, h, w);
        self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out)?, Op::Upsample2 { input })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = activation::relu(self.value(input).data());
        let shape = self.value(input).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu { input })
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat_channels", "no inputs"));
        };
        let [n, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let [ni, ci, hi, wi] = self.value(id).dims4("concat_channels")?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} does not match {:?} on N,H,W", self.value(id).shape(), self.value(first).shape()),
                ));
            }
            channels.push(ci);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&id, &ci) in inputs.iter().zip(&channels) {
                let d = self.value(id).data();
                out.extend_from_slice(&d[b * ci * plane..(b + 1) * ci * plane]);
            }
        }
        self.push(Tensor::new(vec![n, total, h, w], out)?, Op::Concat { inputs: inputs.to_vec() })
    }

    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("softmax_channels")?;
        let out = activation::softmax_channels(self.value(input).data(), n, c, h * w);
        self.push(Tensor::new(vec![n, c, h, w], out)?, Op::Softmax { input })
    }

    fn bn_operands(&self, op: &'static str, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<[usize; 4]> {
        let dims = self.value(input).dims4(op)?;
        let c = dims[1];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                op,
                format!(
                    "input has {c} channels, gamma {} and beta {}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        Ok(dims)
    }

    /// Train-mode BN; the batch statistics are kept on the node for the
    /// running-average update (see [`Graph::bn_batch_stats`]).
    pub fn batch_norm_train(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let [n, c, h, w] = self.bn_operands("bn_forward", input, gamma, beta)?;
        let f = batch_norm_train(
            self.value(input).data(),
            n,
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        self.push(
            Tensor::new(vec![n, c, h, w], f.y)?,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.stats.inv_std,
                mean: f.stats.mean,
                var: f.stats.var,
            },
        )
    }

    /// Eval-mode BN with fixed population statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.bn_operands("bn_forward", input, gamma, beta)?;
        let plane = h * w;
        let x = self.value(input).data();
        let y = batch_norm_eval(x, n, c, plane, self.value(gamma).data(), self.value(beta).data(), mean, var, eps);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let needs_gamma = self.requires_grad(gamma);
        let xhat = if needs_gamma {
            let mut xh = vec![T::zero(); x.len()];
            for b in 0..n {
                for k in 0..c {
                    let start = (b * c + k) * plane;
                    for i in start..start + plane {
                        xh[i] = (x[i] - mean[k]) * inv[k];
                    }
                }
            }
            xh
        } else {
            Vec::new()
        };
        self.push(Tensor::new(vec![n, c, h, w], y)?, Op::BatchNormEval { input, gamma, beta, centered_scale: inv, xhat })
    }

    pub fn dice_loss(&mut self, probs: NodeId, labels: &[u8], smooth: T) -> Result<NodeId> {
        let [n, k, h, w] = self.value(probs).dims4("dice_loss")?;
        let (loss, terms) = soft_dice_loss(self.value(probs).data(), labels, n, k, h * w, smooth)?;
        self.push(Tensor::scalar(loss), Op::DiceLoss { probs, labels: labels.to_vec(), smooth, terms })
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// `sum(input * weights)` with constant weights; a random projection for
    /// gradient checks.
    pub fn dot_const(&mut self, input: NodeId, weights: Vec<T>) -> Result<NodeId> {
        if weights.len() != self.value(input).numel() {
            return Err(Error::shape("dot_const", "weight count differs from input size"));
        }
        let s = self.value(input).data().iter().zip(&weights).map(|(&a, &b)| a * b).sum::<T>();
        self.push(Tensor::scalar(s), Op::DotConst { input, weights })
    }

    /// Reverse sweep from a scalar node. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut [T]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                // input and weight are distinct nodes, so both slots can be borrowed at once
                let (gi, gw) = two_slots(self, grads, *input, *weight);
                conv::backward(geom, self.value(*input).data(), self.value(*weight).data(), g, gi, gw);
            }
            Op::AddChannelBias { input, bias } => {
                let [n, c, h, w] = dims(&node.value);
                if let Some(gi) = self.slot(grads, *input) {
                    add_into(gi, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    activation::channel_sums(g, n, c, h * w, gb);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(gi) = self.slot(grads, *input) {
                    pool::maxpool2_backward(g, argmax, gi);
                }
            }
            Op::Upsample2 { input } => {
                let [n, c, h, w] = dims(self.value(*input));
                if let Some(gi) = self.slot(grads, *input) {
                    upsample::backward(g, n * c, h, w, gi);
                }
            }
            Op::Relu { input } => {
                if let Some(gi) = self.slot(grads, *input) {
                    activation::relu_backward(self.value(*input).data(), g, gi);
                }
            }
            Op::Concat { inputs } => {
                let [n, total, h, w] = dims(&node.value);
                let plane = h * w;
                let mut offset = 0;
                for &id in inputs {
                    let ci = self.value(id).shape()[1];
                    if let Some(gi) = self.slot(grads, id) {
                        for b in 0..n {
                            let src = &g[(b * total + offset) * plane..(b * total + offset + ci) * plane];
                            add_into(&mut gi[b * ci * plane..(b + 1) * ci * plane], src);
                        }
                    }
                    offset += ci;
                }
            }
            Op::Softmax { input } => {
                let [n, c, h, w] = dims(&node.value);
                if let Some(gi) = self.slot(grads, *input) {
                    activation::softmax_channels_backward(node.value.data(), g, n, c, h * w, gi);
                }
            }
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std, .. } => {
                let [n, c, h, w] = dims(&node.value);
                let gamma_v = self.value(*gamma).data().to_vec();
                let mut gx = self.slot(grads, *input).map(|s| s.to_vec());
                let mut gg = self.slot(grads, *gamma).map(|s| s.to_vec());
                let mut gb = self.slot(grads, *beta).map(|s| s.to_vec());
                batch_norm_train_backward(
                    g,
                    xhat,
                    inv_std,
                    &gamma_v,
                    n,
                    c,
                    h * w,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                store(grads, *input, gx);
                store(grads, *gamma, gg);
                store(grads, *beta, gb);
            }
            Op::BatchNormEval { input, gamma, beta, centered_scale, xhat } => {
                let [n, c, h, w] = dims(&node.value);
                let plane = h * w;
                let gamma_v = self.value(*gamma).data();
                if let Some(gi) = self.slot(grads, *input) {
                    for b in 0..n {
                        for k in 0..c {
                            let s = gamma_v[k] * centered_scale[k];
                            let start = (b * c + k) * plane;
                            for i in start..start + plane {
                                gi[i] += s * g[i];
                            }
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for b in 0..n {
                        for (k, acc) in gg.iter_mut().enumerate() {
                            let start = (b * c + k) * plane;
                            for i in start..start + plane {
                                *acc += g[i] * xhat[i];
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    activation::channel_sums(g, n, c, plane, gb);
                }
            }
            Op::DiceLoss { probs, labels, smooth, terms } => {
                let [n, k, h, w] = dims(self.value(*probs));
                let pv = self.value(*probs).data();
                if let Some(gp) = self.slot(grads, *probs) {
                    soft_dice_loss_backward(pv, labels, n, k, h * w, *smooth, terms, g[0], gp);
                }
            }
            Op::Sum { input } => {
                if let Some(gi) = self.slot(grads, *input) {
                    gi.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::DotConst { input, weights } => {
                if let Some(gi) = self.slot(grads, *input) {
                    gi.iter_mut().zip(weights).for_each(|(v, &w)| *v += g[0] * w);
                }
            }
        }
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    t.dims4("backward").expect("rank-4 node")
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn store<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, value: Option<Vec<T>>) {
    if let Some(v) = value {
        grads[id.0] = Some(v);
    }
}

fn two_slots<'a, T: Scalar>(
    graph: &Graph<T>,
    grads: &'a mut [Option<Vec<T>>],
    a: NodeId,
    b: NodeId,
) -> (Option<&'a mut [T]>, Option<&'a mut [T]>) {
    assert_ne!(a, b, "operands must be distinct nodes");
    for id in [a, b] {
        if graph.requires_grad(id) && grads[id.0].is_none() {
            grads[id.0] = Some(vec![T::zero(); graph.value(id).numel()]);
        }
    }
    let (lo, hi, swapped) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
    let (left, right) = grads.split_at_mut(hi);
    let first = if graph.requires_grad(NodeId(lo)) { left[lo].as_deref_mut() } else { None };
    let second = if graph.requires_grad(NodeId(hi)) { right[0].as_deref_mut() } else { None };
    if swapped {
        (second, first)
    } else {
        (first, second)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = g.dot_const(x, vec![0.5, -1.0, 2.0]).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, -2.0, 4.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn frozen_leaf_gets_no_buffer() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), true);
        let w = g.leaf(Tensor::full(vec![1, 1, 3, 3], 0.5), false);
        let y = g.conv2d(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 2, 2]), true);
        let r = g.relu(x).unwrap();
        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]), false);
        let w = g.leaf(Tensor::zeros(vec![3, 5, 3, 3]), false);
        let msg = g.conv2d(x, w).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[3, 5, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_of_ones_by_hand() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
        let w = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
        let y = g.conv2d(x, w).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[4], 9.0);
        assert_eq!([out[0], out[2], out[6], out[8]], [4.0; 4]);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn zero_input_gives_zero_conv() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 3, 5, 5]), false);
        let w = g.leaf(Tensor::full(vec![4, 3, 3, 3], 0.3), false);
        let y = g.conv2d(x, w).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 3, 4]), false);
        assert!(matches!(g.maxpool2(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_shapes_add_up() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 2, 4, 4]), false);
        let b = g.leaf(Tensor::full(vec![2, 3, 4, 4], 1.0), false);
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 5, 4, 4]);
        let bad = g.leaf(Tensor::zeros(vec![2, 1, 2, 4]), false);
        assert!(g.concat_channels(&[a, bad]).is_err());
    }
}
