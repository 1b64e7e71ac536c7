//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are
//! handed out in evaluation order, so the tape is already topologically
//! sorted and `backward` simply walks it in reverse.

use rand::Rng;

use super::kernels::{self, ConvGeom, Padding, FROM_PAD};
use super::tensor::{argmax, Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Normalises over the last axis.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Binary cross-entropy, mean over every element.
    Bce,
    /// Mean squared error, mean over every element.
    Mse,
    /// Categorical cross-entropy on probabilities with one-hot targets:
    /// summed over classes, averaged over the batch.
    CrossEntropy,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeom },
    MaxPool { x: NodeId, winners: Vec<usize> },
    AvgPool { x: NodeId },
    Upsample { x: NodeId },
    Reshape { x: NodeId },
    Dense { x: NodeId, weights: NodeId, bias: NodeId, rows: usize, inputs: usize, units: usize },
    Activation { x: NodeId, kind: Activation },
    Dropout { x: NodeId, mask: Vec<T> },
    GlobalAvgPool { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    AddConst { x: NodeId },
    Affine { x: NodeId, scale: T },
    SumAll { x: NodeId },
    L2Norm { x: NodeId },
    ClassMargin { x: NodeId, rivals: Vec<usize>, labels: Vec<usize> },
    Loss { kind: LossKind, x: NodeId, target: Tensor<T> },
    SoftmaxCrossEntropy { x: NodeId, target: Tensor<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::Reshape { .. } => "reshape",
            Op::Dense { .. } => "dense",
            Op::Activation { .. } => "activation",
            Op::Dropout { .. } => "dropout",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::AddConst { .. } => "add_const",
            Op::Affine { .. } => "affine",
            Op::SumAll { .. } => "sum",
            Op::L2Norm { .. } => "l2_norm",
            Op::ClassMargin { .. } => "class_margin",
            Op::Loss { .. } => "loss",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation with gradient storage.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. `id`, if it requires one.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Clears all stored gradients so the graph can be differentiated again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn check(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::State(format!("node {} does not exist", id.0)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {}", op.name())));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Stride-1 convolution of `[N,H,W,Cin]` by `[k,k,Cin,Cout]` plus bias.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, padding: Padding) -> Result<NodeId> {
        let (xs, ks, bs) = (
            self.check(x)?.shape().to_vec(),
            self.check(kernel)?.shape().to_vec(),
            self.check(bias)?.shape().to_vec(),
        );
        if xs.len() != 4 || ks.len() != 4 || ks[0] != ks[1] {
            return Err(Error::shape(format!("conv2d: input {xs:?}, kernel {ks:?}")));
        }
        if ks[2] != xs[3] {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {} input channels, input has {}",
                ks[2], xs[3]
            )));
        }
        if bs != [ks[3]] {
            return Err(Error::shape(format!("conv2d: bias {bs:?} for {} output channels", ks[3])));
        }
        if padding == Padding::Same && ks[0] % 2 == 0 {
            return Err(Error::shape("conv2d: same padding needs an odd kernel"));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ks[0], ks[3], padding)
            .ok_or_else(|| Error::shape(format!("conv2d: input {xs:?} smaller than kernel")))?;
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[kernel.0].value.data(),
            self.nodes[bias.0].value.data(),
            &geom,
        );
        let value = Tensor::new(vec![geom.n, geom.oh, geom.ow, geom.cout], out)?;
        self.push(value, Op::Conv2d { x, kernel, bias, geom }, &[x, kernel, bias])
    }

    fn image_dims(&self, x: NodeId, what: &str) -> Result<[usize; 4]> {
        let s = self.check(x)?.shape();
        match *s {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(Error::shape(format!("{what}: expected [N,H,W,C], got {s:?}"))),
        }
    }

    pub fn max_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, h, w, c] = self.image_dims(x, "max_pool2x2")?;
        let (out, winners) = kernels::max_pool_forward(self.nodes[x.0].value.data(), n, h, w, c);
        let value = Tensor::new(vec![n, h.div_ceil(2), w.div_ceil(2), c], out)?;
        self.push(value, Op::MaxPool { x, winners }, &[x])
    }

    pub fn avg_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, h, w, c] = self.image_dims(x, "avg_pool2x2")?;
        let out = kernels::avg_pool_forward(self.nodes[x.0].value.data(), n, h, w, c);
        let value = Tensor::new(vec![n, h.div_ceil(2), w.div_ceil(2), c], out)?;
        self.push(value, Op::AvgPool { x }, &[x])
    }

    pub fn upsample2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, h, w, c] = self.image_dims(x, "upsample2x2")?;
        let out = kernels::upsample_forward(self.nodes[x.0].value.data(), n, h, w, c);
        let value = Tensor::new(vec![n, 2 * h, 2 * w, c], out)?;
        self.push(value, Op::Upsample { x }, &[x])
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.shape().to_vec();
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.check(x)?.clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// `[N,n] x [n,u] + [u]`; a rank-1 input is treated as a batch of one.
    pub fn dense(&mut self, x: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.check(x)?.shape().to_vec();
        let ws = self.check(weights)?.shape().to_vec();
        let bs = self.check(bias)?.shape().to_vec();
        let (rows, inputs) = match *xs {
            [n] => (1, n),
            [b, n] => (b, n),
            _ => return Err(Error::shape(format!("dense: input must be rank 1 or 2, got {xs:?}"))),
        };
        if ws.len() != 2 || ws[0] != inputs {
            return Err(Error::shape(format!("dense: input {xs:?} vs weights {ws:?}")));
        }
        let units = ws[1];
        if bs != [units] {
            return Err(Error::shape(format!("dense: bias {bs:?} for {units} units")));
        }
        let out = kernels::dense_forward(
            self.nodes[x.0].value.data(),
            self.nodes[weights.0].value.data(),
            self.nodes[bias.0].value.data(),
            rows,
            inputs,
            units,
        );
        let shape = if xs.len() == 1 { vec![units] } else { vec![rows, units] };
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Dense { x, weights, bias, rows, inputs, units }, &[x, weights, bias])
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let input = self.check(x)?;
        let value = match kind {
            Activation::Relu => input.map(|v| v.max(T::zero())),
            Activation::Sigmoid => input.map(sigmoid),
            Activation::Tanh => input.map(|v| v.tanh()),
            Activation::Softmax => softmax_last_axis(input),
        };
        self.push(value, Op::Activation { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0,1)")));
        }
        let input = self.check(x)?;
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..input.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(input.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// `[N,H,W,C] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, h, w, c] = self.image_dims(x, "global_avg_pool")?;
        let data = self.nodes[x.0].value.data();
        let count = T::lit((h * w) as f64);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for p in 0..h * w {
                let base = (b * h * w + p) * c;
                for ch in 0..c {
                    out[b * c + ch] = out[b * c + ch] + data[base + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / count);
        let value = Tensor::new(vec![n, c], out)?;
        self.push(value, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.zip_map(self.check(b)?, |p, q| p + q)?;
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.zip_map(self.check(b)?, |p, q| p - q)?;
        self.push(value, Op::Sub { a, b }, &[a, b])
    }

    /// Adds a fixed tensor that takes no part in differentiation.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor<T>) -> Result<NodeId> {
        let value = self.check(x)?.zip_map(c, |p, q| p + q)?;
        self.push(value, Op::AddConst { x }, &[x])
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: T, offset: T) -> Result<NodeId> {
        let value = self.check(x)?.map(|v| scale * v + offset);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.check(x)?.sum());
        self.push(value, Op::SumAll { x }, &[x])
    }

    /// Euclidean norm over all elements. The gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let input = self.check(x)?;
        let norm = input.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        self.push(Tensor::scalar(norm), Op::L2Norm { x }, &[x])
    }

    /// Per row of a `[N,K]` (or `[K]`) logit tensor: `z[t] - max_{i != t} z[i]`.
    pub fn class_margin(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        let input = self.check(x)?;
        let k = *input.shape().last().expect("rank >= 1");
        let rows = input.len() / k;
        if labels.len() != rows || k < 2 || labels.iter().any(|&t| t >= k) {
            return Err(Error::shape(format!(
                "class_margin: {rows} rows of {k} classes vs labels {labels:?}"
            )));
        }
        let mut rivals = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for (r, &t) in labels.iter().enumerate() {
            let row = &input.data()[r * k..(r + 1) * k];
            let mut best = if t == 0 { 1 } else { 0 };
            for (i, &v) in row.iter().enumerate() {
                if i != t && v > row[best] {
                    best = i;
                }
            }
            rivals.push(best);
            out.push(row[t] - row[best]);
        }
        let value = Tensor::new(vec![rows], out)?;
        self.push(value, Op::ClassMargin { x, rivals, labels: labels.to_vec() }, &[x])
    }

    /// Scalar loss of `prediction` against a fixed `target`.
    pub fn loss(&mut self, kind: LossKind, prediction: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let p = self.check(prediction)?;
        p.expect_same_shape(target, "loss")?;
        let lo = T::lit(PROB_CLAMP);
        let hi = T::one() - lo;
        let n = T::lit(p.len() as f64);
        let value = match kind {
            LossKind::Mse => p
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                / n,
            LossKind::Bce => {
                if target.data().iter().any(|&t| t < T::zero() || t > T::one()) {
                    return Err(Error::Argument("bce target outside [0,1]".into()));
                }
                -p.data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &t)| {
                        let a = a.max(lo).min(hi);
                        t * a.ln() + (T::one() - t) * (T::one() - a).ln()
                    })
                    .sum::<T>()
                    / n
            }
            LossKind::CrossEntropy => {
                let rows = T::lit(batch_rows(p.shape()) as f64);
                -p.data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &t)| t * a.max(lo).min(hi).ln())
                    .sum::<T>()
                    / rows
            }
        };
        self.push(Tensor::scalar(value), Op::Loss { kind, x: prediction, target: target.clone() }, &[prediction])
    }

    /// Categorical cross-entropy computed from logits through a log-softmax;
    /// equal to `CrossEntropy(softmax(z))` without the probability clamp.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let z = self.check(logits)?;
        z.expect_same_shape(target, "softmax_cross_entropy")?;
        let k = *z.shape().last().expect("rank >= 1");
        let rows = z.len() / k;
        let mut total = T::zero();
        for r in 0..rows {
            let row = &z.data()[r * k..(r + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            let t = &target.data()[r * k..(r + 1) * k];
            total = total + row.iter().zip(t).map(|(&v, &tv)| tv * (lse - v)).sum::<T>();
        }
        let value = Tensor::scalar(total / T::lit(rows as f64));
        self.push(value, Op::SoftmaxCrossEntropy { x: logits, target: target.clone() }, &[logits])
    }

    /// Back-propagates from the scalar `loss` node into every node that
    /// requires a gradient. Gradients accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let value = self.check(loss).map_err(|_| {
            Error::State(format!("backward from node {} before it was evaluated", loss.0))
        })?;
        if value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, node has shape {:?}",
                value.shape()
            )));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[idx], &dy);
                continue;
            }
            for (input, g) in self.input_grads(idx, &dy) {
                accumulate(&mut pending[input.0], &g);
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn zeros_for(&self, id: NodeId) -> Vec<T> {
        vec![T::zero(); self.nodes[id.0].value.len()]
    }

    /// Vector-Jacobian products of node `idx` for each input needing a gradient.
    fn input_grads(&self, idx: usize, dy: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, geom } => {
                let mut dx = self.wants(*x).then(|| self.zeros_for(*x));
                let mut dk = self.wants(*kernel).then(|| self.zeros_for(*kernel));
                let mut db = self.wants(*bias).then(|| self.zeros_for(*bias));
                kernels::conv2d_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[kernel.0].value.data(),
                    dy,
                    geom,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dk.map(|g| (*kernel, g)));
                out.extend(db.map(|g| (*bias, g)));
            }
            Op::MaxPool { x, winners } => {
                let mut dx = self.zeros_for(*x);
                for (&w, &g) in winners.iter().zip(dy) {
                    if w != FROM_PAD {
                        dx[w] = dx[w] + g;
                    }
                }
                out.push((*x, dx));
            }
            Op::AvgPool { x } => {
                let s = self.nodes[x.0].value.shape();
                let mut dx = self.zeros_for(*x);
                kernels::avg_pool_backward(dy, &mut dx, s[0], s[1], s[2], s[3]);
                out.push((*x, dx));
            }
            Op::Upsample { x } => {
                let s = self.nodes[x.0].value.shape();
                let mut dx = self.zeros_for(*x);
                kernels::upsample_backward(dy, &mut dx, s[0], s[1], s[2], s[3]);
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, dy.to_vec())),
            Op::Dense { x, weights, bias, rows, inputs, units } => {
                let mut dx = self.wants(*x).then(|| self.zeros_for(*x));
                let mut dw = self.wants(*weights).then(|| self.zeros_for(*weights));
                let mut db = self.wants(*bias).then(|| self.zeros_for(*bias));
                kernels::dense_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[weights.0].value.data(),
                    dy,
                    *rows,
                    *inputs,
                    *units,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|g| (*x, g)));
                out.extend(dw.map(|g| (*weights, g)));
                out.extend(db.map(|g| (*bias, g)));
            }
            Op::Activation { x, kind } => {
                let dx = match kind {
                    Activation::Relu => y.iter().zip(dy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect(),
                    Activation::Sigmoid => y.iter().zip(dy).map(|(&v, &g)| g * v * (T::one() - v)).collect(),
                    Activation::Tanh => y.iter().zip(dy).map(|(&v, &g)| g * (T::one() - v * v)).collect(),
                    Activation::Softmax => {
                        let k = *node.value.shape().last().expect("rank >= 1");
                        let mut dx = vec![T::zero(); y.len()];
                        for r in 0..y.len() / k {
                            let (yr, gr) = (&y[r * k..(r + 1) * k], &dy[r * k..(r + 1) * k]);
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for i in 0..k {
                                dx[r * k + i] = yr[i] * (gr[i] - dot);
                            }
                        }
                        dx
                    }
                };
                out.push((*x, dx));
            }
            Op::Dropout { x, mask } => out.push((*x, dy.iter().zip(mask).map(|(&g, &m)| g * m).collect())),
            Op::GlobalAvgPool { x } => {
                let s = self.nodes[x.0].value.shape();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let count = T::lit(hw as f64);
                let mut dx = self.zeros_for(*x);
                for b in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            dx[(b * hw + p) * c + ch] = dy[b * c + ch] / count;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, dy.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, dy.iter().map(|&g| -g).collect()));
                }
            }
            Op::AddConst { x } => out.push((*x, dy.to_vec())),
            Op::Affine { x, scale } => out.push((*x, dy.iter().map(|&g| g * *scale).collect())),
            Op::SumAll { x } => out.push((*x, vec![dy[0]; self.nodes[x.0].value.len()])),
            Op::L2Norm { x } => {
                let norm = y[0];
                let xv = self.nodes[x.0].value.data();
                let dx = if norm > T::zero() {
                    xv.iter().map(|&v| dy[0] * v / norm).collect()
                } else {
                    self.zeros_for(*x)
                };
                out.push((*x, dx));
            }
            Op::ClassMargin { x, rivals, labels } => {
                let k = *self.nodes[x.0].value.shape().last().expect("rank >= 1");
                let mut dx = self.zeros_for(*x);
                for (r, (&t, &o)) in labels.iter().zip(rivals).enumerate() {
                    dx[r * k + t] = dx[r * k + t] + dy[r];
                    dx[r * k + o] = dx[r * k + o] - dy[r];
                }
                out.push((*x, dx));
            }
            Op::Loss { kind, x, target } => {
                let p = self.nodes[x.0].value.data();
                let t = target.data();
                let g = dy[0];
                let lo = T::lit(PROB_CLAMP);
                let hi = T::one() - lo;
                let in_range = |a: T| a >= lo && a <= hi;
                let dx = match kind {
                    LossKind::Mse => {
                        let n = T::lit(p.len() as f64);
                        p.iter().zip(t).map(|(&a, &b)| g * T::lit(2.0) * (a - b) / n).collect()
                    }
                    LossKind::Bce => {
                        let n = T::lit(p.len() as f64);
                        p.iter()
                            .zip(t)
                            .map(|(&a, &b)| {
                                if in_range(a) {
                                    g * (-b / a + (T::one() - b) / (T::one() - a)) / n
                                } else {
                                    T::zero()
                                }
                            })
                            .collect()
                    }
                    LossKind::CrossEntropy => {
                        let rows = T::lit(batch_rows(self.nodes[x.0].value.shape()) as f64);
                        p.iter()
                            .zip(t)
                            .map(|(&a, &b)| if in_range(a) { -g * b / (a * rows) } else { T::zero() })
                            .collect()
                    }
                };
                out.push((*x, dx));
            }
            Op::SoftmaxCrossEntropy { x, target } => {
                let zt = &self.nodes[x.0].value;
                let probs = softmax_last_axis(zt);
                let k = *zt.shape().last().expect("rank >= 1");
                let rows = T::lit((zt.len() / k) as f64);
                let dx = probs
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| dy[0] * (p - t) / rows)
                    .collect();
                out.push((*x, dx));
            }
        }
        out.retain(|(id, _)| self.wants(*id));
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

fn batch_rows(shape: &[usize]) -> usize {
    if shape.len() <= 1 {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Max-shifted softmax over the last axis.
pub fn softmax_last_axis<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Softmax of a logit vector; convenience for callers outside a graph.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    softmax_last_axis(&Tensor::new(vec![logits.len()], logits.to_vec()).expect("non-empty")).into_data()
}

#[allow(dead_code)]
pub(crate) fn row_argmax<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
    let k = *x.shape().last().expect("rank >= 1");
    x.data().chunks(k).map(argmax).collect()
}
