//! Reverse-mode gradient tape.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the backward pass. [`GradTape::backward`] walks the nodes in exact
//! reverse order of execution. Leaves may borrow their values (model
//! parameters) so a per-sample tape never copies the weights.

use std::borrow::Cow;

use super::{ops, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Value copy that blocks gradient flow.
    Detach,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        indices: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
    /// `weight * sum_j bce(clamp(sigmoid(z_j)), t_j)` over a logit vector.
    BceWithLogits {
        logits: Var,
        targets: Vec<f32>,
        weight: f32,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Probability clamp applied before taking logs in binary cross-entropy.
pub const BCE_EPS: f32 = 1e-7;

/// Binary cross-entropy `-(t log p + (1-t) log(1-p))` with `p` clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce(p: f32, target: f32) -> f32 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

#[derive(Default)]
pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that borrows its value, e.g. a model parameter.
    pub fn leaf(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(Cow::Owned(v), Op::Detach)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(Cow::Owned(out), Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(Cow::Owned(out), Op::Relu(x))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, indices) = ops::max_pool2d_with_indices(self.value(x), k, stride)?;
        Ok(self.push(Cow::Owned(out), Op::MaxPool { input: x, indices }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Cow::Owned(out), Op::GlobalAvgPool(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(Cow::Owned(out), Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax(self.value(x));
        self.push(Cow::Owned(out), Op::Softmax(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Cow::Owned(out), Op::Reshape(x)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| e * factor).collect(),
        };
        self.push(Cow::Owned(out), Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x))
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let ce = ops::cross_entropy_logits(self.value(logits).data(), label)?;
        Ok(self.push(Cow::Owned(Tensor::scalar(ce)), Op::CrossEntropy { logits, label }))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f32>, weight: f32) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits for {} targets", z.len(), targets.len()),
            ));
        }
        let total: f32 = z
            .data()
            .iter()
            .zip(&targets)
            .map(|(&zi, &t)| bce(ops::sigmoid_scalar(zi), t))
            .sum();
        Ok(self.push(
            Cow::Owned(Tensor::scalar(weight * total)),
            Op::BceWithLogits { logits, targets, weight },
        ))
    }

    /// Back-propagates from a scalar node. Returns the gradient of `loss` with
    /// respect to every node reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*weight), *stride, *pad, &g)?;
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *weight, cg.weight);
                    accumulate(&mut grads, *bias, cg.bias);
                }
                Op::Dense { input, weight, bias } => {
                    let dg = ops::dense_backward(self.value(*input), self.value(*weight), &g)?;
                    accumulate(&mut grads, *input, dg.input);
                    accumulate(&mut grads, *weight, dg.weight);
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *bias, dg.bias.reshape(bshape)?);
                }
                Op::Relu(x) => accumulate(&mut grads, *x, ops::relu_backward(&node.value, &g)),
                Op::MaxPool { input, indices } => {
                    let gi = ops::max_pool2d_backward(self.value(*input).shape(), indices, &g)?;
                    accumulate(&mut grads, *input, gi);
                }
                Op::GlobalAvgPool(x) => {
                    let gi = ops::global_avg_pool_backward(self.value(*x).shape(), &g)?;
                    accumulate(&mut grads, *x, gi);
                }
                Op::Sigmoid(x) => accumulate(&mut grads, *x, ops::sigmoid_backward(&node.value, &g)),
                Op::Softmax(x) => accumulate(&mut grads, *x, ops::softmax_backward(self.value(*x), &g)),
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.clone().reshape(shape)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |gv, bv| gv * bv);
                    let gb = zip_map(&g, self.value(*a), |gv, av| gv * av);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, f) => {
                    let gi = Tensor {
                        shape: g.shape().to_vec(),
                        data: g.data().iter().map(|&v| v * f).collect(),
                    };
                    accumulate(&mut grads, *x, gi);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::filled(self.value(*x).shape(), gv));
                }
                Op::CrossEntropy { logits, label } => {
                    let gv = g.data()[0];
                    let p = ops::cross_entropy_grad(self.value(*logits).data(), *label);
                    let gi = Tensor {
                        shape: self.value(*logits).shape().to_vec(),
                        data: p.into_iter().map(|v| v * gv).collect(),
                    };
                    accumulate(&mut grads, *logits, gi);
                }
                Op::BceWithLogits { logits, targets, weight } => {
                    let gv = g.data()[0] * weight;
                    let z = self.value(*logits);
                    let gi = Tensor {
                        shape: z.shape().to_vec(),
                        data: z
                            .data()
                            .iter()
                            .zip(targets)
                            .map(|(&zi, &t)| gv * ops::bce_logit_grad(zi, t))
                            .collect(),
                    };
                    accumulate(&mut grads, *logits, gi);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
