//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass. [`Graph::backward`] walks the tape in reverse once; the
//! graph is consumed afterwards.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Param,
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, pad: usize },
    Relu { input: NodeId },
    MaxPool { input: NodeId, argmax: Vec<usize> },
    Flatten { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Dropout { input: NodeId, mask: Vec<T> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
    CosineRsm { input: NodeId, unit: Vec<T>, norms: Vec<T> },
    Mismatch { predicted: NodeId, target: Vec<T>, scale: T },
    Add { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: T },
    Sum { input: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<usize, NodeId>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant or differentiable input that is not a network parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers network parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize, value: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(&index) {
            return id;
        }
        let id = self.push(value.clone(), Op::Param);
        self.params.insert(index, id);
        id
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, pad: usize) -> Result<NodeId> {
        let v = ops::conv2d_forward(self.value(input), self.value(weight), self.value(bias), pad)?;
        Ok(self.push(v, Op::Conv2d { input, weight, bias, pad }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = ops::relu_forward(self.value(input));
        self.push(v, Op::Relu { input })
    }

    pub fn maxpool(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let (v, argmax) = ops::maxpool_forward(self.value(input), size)?;
        Ok(self.push(v, Op::MaxPool { input, argmax }))
    }

    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let shape = vec![x.batch(), x.row_len()];
        let v = x.clone().reshape(shape).expect("flatten keeps length");
        self.push(v, Op::Flatten { input })
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(v, Op::Linear { input, weight, bias }))
    }

    /// Inverted dropout: keeps each unit with probability `retention` and
    /// rescales survivors by `1 / retention`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, retention: f64, rng: &mut R) -> NodeId {
        let keep = T::from_f64(1.0 / retention);
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < retention { keep } else { T::zero() })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Dropout { input, mask })
    }

    /// Mean softmax cross-entropy against class-index labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Cosine similarity matrix between the flattened per-item rows of `input`.
    pub fn cosine_rsm(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, unit, norms) = ops::cosine_rsm_forward(self.value(input))?;
        Ok(self.push(v, Op::CosineRsm { input, unit, norms }))
    }

    /// `scale · Σ (target − predicted)²` over all entries.
    pub fn squared_mismatch(&mut self, predicted: NodeId, target: &[T], scale: T) -> Result<NodeId> {
        let p = self.value(predicted);
        if p.len() != target.len() {
            return Err(Error::Shape {
                context: "squared mismatch".into(),
                expected: vec![target.len()],
                actual: p.shape().to_vec(),
            });
        }
        let v = ops::squared_mismatch(target, p.data(), scale);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Mismatch {
                predicted,
                target: target.to_vec(),
                scale,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                context: "add".into(),
                expected: x.shape().to_vec(),
                actual: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(input).sum());
        self.push(v, Op::Sum { input })
    }

    /// Reverse sweep from scalar `loss`. The tape can only be swept once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph("backward called on an already consumed graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, weight, bias, pad } => {
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*weight), &g, *pad)?;
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *weight, cg.weight);
                    accumulate(&mut grads, *bias, cg.bias);
                }
                Op::Relu { input } => {
                    let d = ops::relu_backward(self.value(*input), &g);
                    accumulate(&mut grads, *input, d);
                }
                Op::MaxPool { input, argmax } => {
                    let d = ops::maxpool_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads, *input, d);
                }
                Op::Flatten { input } => {
                    let d = g.reshape(self.value(*input).shape().to_vec())?;
                    accumulate(&mut grads, *input, d);
                }
                Op::Linear { input, weight, bias } => {
                    let lg = ops::linear_backward(self.value(*input), self.value(*weight), &g)?;
                    accumulate(&mut grads, *input, lg.input);
                    accumulate(&mut grads, *weight, lg.weight);
                    accumulate(&mut grads, *bias, lg.bias);
                }
                Op::Dropout { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    accumulate(&mut grads, *input, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let d = ops::softmax_cross_entropy_backward(probs, labels, g.item());
                    let shape = self.value(*logits).shape().to_vec();
                    accumulate(&mut grads, *logits, Tensor::new(shape, d)?);
                }
                Op::CosineRsm { input, unit, norms } => {
                    let d = ops::cosine_rsm_backward(self.value(*input).shape(), unit, norms, &g);
                    accumulate(&mut grads, *input, d);
                }
                Op::Mismatch { predicted, target, scale } => {
                    let p = self.value(*predicted);
                    let d = ops::squared_mismatch_backward(target, p.data(), *scale, g.item());
                    accumulate(&mut grads, *predicted, Tensor::new(p.shape().to_vec(), d)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale { input, factor } => {
                    let data = g.data().iter().map(|&v| v * *factor).collect();
                    accumulate(&mut grads, *input, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Sum { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, Tensor::filled(&shape, g.item()));
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: self.params.clone(),
        })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_scaled(&g, T::one()),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep: gradients of leaf and parameter nodes.
pub struct Gradients<T: Real> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<usize, NodeId>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf or parameter node, if it was reached.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    /// One gradient per parameter, aligned with `shapes`; parameters the
    /// loss never touched get zeros.
    pub fn for_params(&self, shapes: &[&[usize]]) -> Vec<Tensor<T>> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                self.params
                    .get(&i)
                    .and_then(|id| self.wrt(*id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(shape))
            })
            .collect()
    }
}
