//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Leaves
//! are either constant inputs or parameters borrowed from a [`ParamSet`];
//! [`Graph::backward`] replays the tape in reverse and returns one gradient
//! per parameter leaf. Nodes that do not depend on a trainable parameter are
//! never differentiated, so frozen sub-networks cost a forward pass only.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::ops;
use crate::params::{Grads, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    ConcatChannels(Vec<Var>),
    Resize {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Delta {
        after: Var,
        before: Var,
        lambda: Var,
    },
    Sigmoid {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
        residual: T,
    },
    WeightedSum {
        input: Var,
        weights: Tensor<T>,
    },
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

struct ParamLeaf {
    name: String,
    var: Var,
    trainable: bool,
}

pub struct Graph<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<String, Var>,
    param_leaves: Vec<ParamLeaf>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            param_leaves: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Low-order part of a loss node: the loss is `value + residual` to
    /// beyond working precision. Zero for nodes that do not track one.
    pub fn residual(&self, v: Var) -> T {
        match self.nodes[v.0].op {
            Op::BceWithLogits { residual, .. } => residual,
            _ => T::zero(),
        }
    }

    /// Hash of the branch taken at every non-smooth point that depends on a
    /// trainable parameter: ReLU and delta signs and max-pool winners. The
    /// loss is differentiable along a path on which this stays constant.
    pub fn kink_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |x: u64| h = (h ^ x).wrapping_mul(PRIME);
        for (i, node) in self.nodes.iter().enumerate().filter(|(_, n)| n.requires_grad) {
            match &node.op {
                Op::Relu { .. } | Op::Delta { .. } => {
                    feed(i as u64);
                    for chunk in node.value.data().chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |acc, (j, &v)| acc | (u64::from(v > T::zero()) << j));
                        feed(bits);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    feed(i as u64);
                    argmax.iter().for_each(|&a| feed(a as u64));
                }
                _ => {}
            }
        }
        h
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; never differentiated.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Parameter leaf borrowed from `params`. Repeated lookups of the same
    /// name return the same node, so tied weights accumulate one gradient.
    pub fn param(&mut self, params: &'p ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let p = params.get(name)?;
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, p.trainable);
        self.param_vars.insert(name.to_string(), v);
        self.param_leaves.push(ParamLeaf {
            name: name.to_string(),
            var: v,
            trainable: p.trainable,
        });
        Ok(v)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize, stride: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), padding, stride)?;
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            Cow::Owned(out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
                stride,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2_with_argmax(self.value(input))?;
        let rg = self.needs(input);
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.push(Cow::Owned(out), Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        let rg = self.needs(input);
        self.push(Cow::Owned(out), Op::Sigmoid { input }, rg)
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Cow::Owned(out),
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    /// Concatenates rank-4 volumes along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Input("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.value(p).shape(), self.value(*first).shape()),
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Cow::Owned(out), Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Corner-aligned bilinear resampling of the spatial axes.
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(input), out_h, out_w)?;
        let rg = self.needs(input);
        Ok(self.push(Cow::Owned(out), Op::Resize { input }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(input);
        Ok(self.push(Cow::Owned(out), Op::Reshape { input }, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(input, &[n, rest])
    }

    pub fn delta(&mut self, after: Var, before: Var, lambda: Var) -> Result<Var> {
        let out = ops::delta_layer(self.value(after), self.value(before), self.value(lambda))?;
        let rg = self.needs(after) || self.needs(before) || self.needs(lambda);
        Ok(self.push(
            Cow::Owned(out),
            Op::Delta {
                after,
                before,
                lambda,
            },
            rg,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let (loss, residual) = ops::bce_with_logits_precise(self.value(logits), &targets)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::BceWithLogits {
                logits,
                targets,
                residual,
            },
            rg,
        ))
    }

    /// `sum(input * weights)` for a constant `weights` of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let v = self.value(input);
        if v.shape() != weights.shape() {
            return Err(shape_err(
                "weighted_sum",
                format!("{:?} vs {:?}", v.shape(), weights.shape()),
            ));
        }
        let s: T = v.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.needs(input);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(s)),
            Op::WeightedSum { input, weights },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per parameter
    /// leaf; non-trainable leaves get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        let mut out = Grads::new();
        for leaf in &self.param_leaves {
            let g = if leaf.trainable {
                grads[leaf.var.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(leaf.var).shape()))
            } else {
                Tensor::zeros(self.value(leaf.var).shape())
            };
            out.insert(leaf.name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => ops::add_into(acc.data_mut(), g.data()),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<'p, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
                stride,
            } => {
                let cg = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *padding,
                    *stride,
                    self.needs(*input),
                )?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *kernel, cg.kernel);
                self.accumulate(grads, *bias, cg.bias);
            }
            Op::MaxPool2 { input, argmax } => {
                let dx = ops::maxpool2_backward(self.value(*input).shape(), argmax, g);
                self.accumulate(grads, *input, dx);
            }
            Op::Relu { input } => {
                let dx = ops::relu_backward(self.value(*input), g);
                self.accumulate(grads, *input, dx);
            }
            Op::Sigmoid { input } => {
                let s = &node.value;
                let data = s
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gy)| gy * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *input, Tensor::new(s.shape(), data)?);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let dg = ops::dense_backward(self.value(*input), self.value(*weight), g, self.needs(*input))?;
                if let Some(dx) = dg.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dg.weight);
                self.accumulate(grads, *bias, dg.bias);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::ConcatChannels(parts) => {
                let (n, total, h, w) = g.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            d.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[n, c, h, w], d)?);
                    }
                    offset += c;
                }
            }
            Op::Resize { input } => {
                let dx = ops::resize_bilinear_backward(self.value(*input).shape(), g);
                self.accumulate(grads, *input, dx);
            }
            Op::Reshape { input } => {
                let dx = g.clone().reshape(self.value(*input).shape())?;
                self.accumulate(grads, *input, dx);
            }
            Op::Delta {
                after,
                before,
                lambda,
            } => {
                let dg = ops::delta_layer_backward(self.value(*after), self.value(*before), self.value(*lambda), g)?;
                self.accumulate(grads, *after, dg.after);
                self.accumulate(grads, *before, dg.before);
                self.accumulate(grads, *lambda, dg.lambda);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.shape()[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &label) in d.data_mut().chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::BceWithLogits { logits, targets, .. } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / T::lit(z.numel() as f64);
                let data = z
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &y)| (T::one() / (T::one() + (-z).exp()) - y) * scale)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(z.shape(), data)?);
            }
            Op::WeightedSum { input, weights } => {
                let s = g.data()[0];
                self.accumulate(grads, *input, weights.map(|w| w * s));
            }
        }
        Ok(())
    }
}
