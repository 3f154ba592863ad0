//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] is built fresh for every forward pass: each operation
//! evaluates eagerly, stores its output, and remembers how to push an
//! upstream gradient back to its inputs. Parameters enter the graph as
//! leaves bound to a [`ParamId`]; after [`Graph::backward`] their gradients
//! can be folded into the owning [`ParamStore`].

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
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
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    ChannelScale { input: Var, scale: Vec<f64> },
    ChannelGather { input: Var, map: Vec<Option<usize>> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BernoulliLogProb { probs: Var, actions: Vec<bool>, clamp: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// A recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A constant or input leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let var = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[var.0].param = Some(id);
        var
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(weight).shape(), stride, pad)?;
        if self.value(bias).numel() != geom.out_channels {
            return shape_err(format!(
                "conv2d bias has {} entries for {} filters",
                self.value(bias).numel(),
                geom.out_channels
            ));
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }))
    }

    /// Non-overlapping `kh`×`kw` max pooling.
    pub fn max_pool(&mut self, input: Var, kh: usize, kw: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return shape_err(format!("max_pool expects [N,C,H,W], got {shape:?}"));
        }
        if kh == 0 || kw == 0 || shape[2] < kh || shape[3] < kw {
            return shape_err(format!("pool window {kh}x{kw} does not fit input {shape:?}"));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(input).data(), &shape, kh, kw);
        let value = Tensor::new(vec![shape[0], shape[1], shape[2] / kh, shape[3] / kw], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    /// `input` [N,in] times `weight`ᵀ ([out,in]) plus `bias` [out].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        if self.value(bias).numel() != ws[0] {
            return shape_err(format!("linear: bias has {} entries for {} outputs", self.value(bias).numel(), ws[0]));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            i,
            o,
        );
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(input))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err(format!("add: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err(format!("mul: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input))
    }

    /// Multiplies every channel `c` of an [N,C,...] tensor by `scale[c]`.
    pub fn channel_scale(&mut self, input: Var, scale: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() < 2 || shape[1] != scale.len() {
            return shape_err(format!("channel_scale: {} factors for shape {shape:?}", scale.len()));
        }
        let plane: usize = shape[2..].iter().product();
        let c = shape[1];
        let mut data = x.data().to_vec();
        for (idx, chunk) in data.chunks_mut(plane.max(1)).enumerate() {
            let s = scale[idx % c];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::ChannelScale { input, scale }))
    }

    /// Output channel `j` copies input channel `map[j]`, or is zero for `None`.
    pub fn channel_gather(&mut self, input: Var, map: Vec<Option<usize>>) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() < 2 {
            return shape_err(format!("channel_gather: input {shape:?} has no channel axis"));
        }
        let c_in = shape[1];
        if let Some(bad) = map.iter().flatten().find(|&&c| c >= c_in) {
            return shape_err(format!("channel_gather: channel {bad} out of range for {c_in}"));
        }
        let plane: usize = shape[2..].iter().product();
        let n = shape[0];
        let mut data = vec![0.0; n * map.len() * plane];
        for b in 0..n {
            for (j, src) in map.iter().enumerate() {
                if let Some(c) = src {
                    let from = &x.data()[(b * c_in + c) * plane..][..plane];
                    data[(b * map.len() + j) * plane..][..plane].copy_from_slice(from);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] = map.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::ChannelGather { input, map }))
    }

    /// Mean softmax cross-entropy of `logits` [N,K] against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return shape_err(format!("cross-entropy: logits {shape:?} vs {} labels", labels.len()));
        }
        let k = shape[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return shape_err(format!("cross-entropy: label {bad} out of range for {k} classes"));
        }
        let n = shape[0];
        let probs = softmax_rows(x.data(), k);
        let loss =
            labels.iter().enumerate().map(|(i, &l)| -log_softmax_at(&x.data()[i * k..(i + 1) * k], l)).sum::<f64>()
                / n as f64;
        let value = Tensor::scalar(loss);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Σᵢ aᵢ·log pᵢ + (1−aᵢ)·log(1−pᵢ) with `p` clamped to `[clamp, 1−clamp]`.
    pub fn bernoulli_log_prob(&mut self, probs: Var, actions: &[bool], clamp: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.numel() != actions.len() {
            return shape_err(format!("bernoulli_log_prob: {} probabilities vs {} actions", p.numel(), actions.len()));
        }
        let lp = bernoulli_log_prob(p.data(), actions, clamp);
        let value = Tensor::scalar(lp);
        Ok(self.push(value, Op::BernoulliLogProb { probs, actions: actions.to_vec(), clamp }))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::NoForward("the graph is empty".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward(format!("node {} was not recorded by this graph", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.nodes[loss.0].value.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        let params = self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (i, p))).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*input).data(), self.value(*weight).data(), dy.data(), geom);
                accumulate(grads, *input, self.value(*input).shape(), dx)?;
                accumulate(grads, *weight, self.value(*weight).shape(), dw)?;
                accumulate(grads, *bias, self.value(*bias).shape(), db)?;
            }
            Op::MaxPool { input, argmax } => {
                let x = self.value(*input);
                let mut dx = vec![0.0; x.numel()];
                for (g, &src) in dy.data().iter().zip(argmax) {
                    dx[src] += g;
                }
                accumulate(grads, *input, x.shape(), dx)?;
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let (dx, dw, db) = kernels::linear_backward(x.data(), w.data(), dy.data(), n, i, o);
                accumulate(grads, *input, x.shape(), dx)?;
                accumulate(grads, *weight, w.shape(), dw)?;
                accumulate(grads, *bias, self.value(*bias).shape(), db)?;
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let dx = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                accumulate(grads, *input, x.shape(), dx)?;
            }
            Op::Sigmoid(input) => {
                let dx = node.value.data().iter().zip(dy.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                accumulate(grads, *input, node.value.shape(), dx)?;
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape();
                accumulate(grads, *input, shape, dy.data().to_vec())?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.shape(), dy.data().to_vec())?;
                accumulate(grads, *b, dy.shape(), dy.data().to_vec())?;
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = y.data().iter().zip(dy.data()).map(|(v, g)| v * g).collect();
                let db = x.data().iter().zip(dy.data()).map(|(v, g)| v * g).collect();
                accumulate(grads, *a, x.shape(), da)?;
                accumulate(grads, *b, y.shape(), db)?;
            }
            Op::Scale(input, factor) => {
                let dx = dy.data().iter().map(|g| g * factor).collect();
                accumulate(grads, *input, dy.shape(), dx)?;
            }
            Op::Sum(input) => {
                let x = self.value(*input);
                accumulate(grads, *input, x.shape(), vec![dy.data()[0]; x.numel()])?;
            }
            Op::ChannelScale { input, scale } => {
                let shape = dy.shape();
                let plane: usize = shape[2..].iter().product();
                let c = shape[1];
                let mut dx = dy.data().to_vec();
                for (idx, chunk) in dx.chunks_mut(plane.max(1)).enumerate() {
                    let s = scale[idx % c];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *input, shape, dx)?;
            }
            Op::ChannelGather { input, map } => {
                let x = self.value(*input);
                let shape = x.shape();
                let (n, c_in) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let mut dx = vec![0.0; x.numel()];
                for b in 0..n {
                    for (j, src) in map.iter().enumerate() {
                        if let Some(c) = src {
                            let from = &dy.data()[(b * map.len() + j) * plane..][..plane];
                            for (d, g) in dx[(b * c_in + c) * plane..][..plane].iter_mut().zip(from) {
                                *d += g;
                            }
                        }
                    }
                }
                accumulate(grads, *input, shape, dx)?;
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let x = self.value(*logits);
                let k = x.shape()[1];
                let n = labels.len() as f64;
                let g = dy.data()[0];
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= g / n);
                accumulate(grads, *logits, x.shape(), dx)?;
            }
            Op::BernoulliLogProb { probs, actions, clamp } => {
                let p = self.value(*probs);
                let g = dy.data()[0];
                let dx = p
                    .data()
                    .iter()
                    .zip(actions)
                    .map(|(&pi, &a)| {
                        if pi <= *clamp || pi >= 1.0 - clamp {
                            0.0
                        } else if a {
                            g / pi
                        } else {
                            -g / (1.0 - pi)
                        }
                    })
                    .collect();
                accumulate(grads, *probs, p.shape(), dx)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, shape: &[usize], delta: Vec<f64>) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), delta)?),
    }
    Ok(())
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[idx] - lse
}

fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

/// Log-likelihood of `actions` under independent Bernoulli(`probs`), with the
/// probabilities clamped to `[clamp, 1-clamp]`.
pub fn bernoulli_log_prob(probs: &[f64], actions: &[bool], clamp: f64) -> f64 {
    probs
        .iter()
        .zip(actions)
        .map(|(&p, &a)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            if a {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}
