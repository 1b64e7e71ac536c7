//! Learned weights bound to a [`ModelSpec`], and the forward pass.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerActivation, LayerSpec, ModelSpec, ParamSpec};
use crate::autodiff::{argmax, Activation, Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

/// Images are pushed through the network in chunks of this many.
const EVAL_CHUNK: usize = 128;

/// One epoch of training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy over the epoch, classifiers only.
    pub accuracy: Option<f64>,
    pub examples: usize,
}

/// Node ids produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub output: NodeId,
    /// Pre-softmax values of a classifier's head.
    pub logits: Option<NodeId>,
    /// Encoder output of an autoencoder.
    pub code: Option<NodeId>,
}

/// A spec plus its weights and training history.
#[derive(Debug)]
pub struct TrainedModel<T: Scalar = f32> {
    spec: ModelSpec,
    params: Vec<ParamSpec>,
    /// Index of each layer's first parameter.
    offsets: Vec<usize>,
    weights: Vec<Tensor<T>>,
    history: Vec<EpochStats>,
    seed: u64,
    label_queries: AtomicU64,
    logits_queries: AtomicU64,
}

impl<T: Scalar> Clone for TrainedModel<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: self.params.clone(),
            offsets: self.offsets.clone(),
            weights: self.weights.clone(),
            history: self.history.clone(),
            seed: self.seed,
            label_queries: AtomicU64::new(0),
            logits_queries: AtomicU64::new(0),
        }
    }
}

impl<T: Scalar> TrainedModel<T> {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec.params()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = params
            .iter()
            .map(|p| {
                if p.is_bias {
                    Tensor::zeros(&p.shape)
                } else {
                    let limit = (6.0 / (p.fan_in + p.fan_out) as f64).sqrt();
                    Tensor::from_fn(&p.shape, |_| T::lit(rng.random_range(-limit..limit)))
                }
            })
            .collect();
        Self::assemble(spec, params, weights, Vec::new(), seed)
    }

    /// Binds externally supplied weights, checking names and shapes.
    pub fn from_parts(
        spec: ModelSpec,
        named: Vec<(String, Tensor<T>)>,
        history: Vec<EpochStats>,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let params = spec.params()?;
        if named.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} weight tensors, got {}",
                params.len(),
                named.len()
            )));
        }
        let mut weights = Vec::with_capacity(named.len());
        for (p, (name, t)) in params.iter().zip(named) {
            if p.name != name || p.shape != t.shape() {
                return Err(Error::Validation(format!(
                    "weight {name} {:?} does not match {} {:?}",
                    t.shape(),
                    p.name,
                    p.shape
                )));
            }
            weights.push(t);
        }
        Self::assemble(spec, params, weights, history, seed)
    }

    fn assemble(
        spec: ModelSpec,
        params: Vec<ParamSpec>,
        weights: Vec<Tensor<T>>,
        history: Vec<EpochStats>,
        seed: u64,
    ) -> Result<Self> {
        let mut offsets = vec![usize::MAX; spec.layers.len()];
        for (i, p) in params.iter().enumerate().rev() {
            offsets[p.layer] = i;
        }
        Ok(Self {
            spec,
            params,
            offsets,
            weights,
            history,
            seed,
            label_queries: AtomicU64::new(0),
            logits_queries: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.weights
    }

    pub fn named_weights(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| p.name.as_str()).zip(&self.weights)
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub(crate) fn push_history(&mut self, stats: EpochStats) {
        self.history.push(stats);
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epochs_trained(&self) -> usize {
        self.history.len()
    }

    /// Same model at another precision.
    pub fn cast<U: Scalar>(&self) -> TrainedModel<U> {
        TrainedModel {
            spec: self.spec.clone(),
            params: self.params.clone(),
            offsets: self.offsets.clone(),
            weights: self.weights.iter().map(Tensor::cast).collect(),
            history: self.history.clone(),
            seed: self.seed,
            label_queries: AtomicU64::new(0),
            logits_queries: AtomicU64::new(0),
        }
    }

    /// Calls that returned logits, through any surface.
    pub fn logits_queries(&self) -> u64 {
        self.logits_queries.load(Ordering::Relaxed)
    }

    /// Calls that returned labels.
    pub fn label_queries(&self) -> u64 {
        self.label_queries.load(Ordering::Relaxed)
    }

    /// Adds every weight tensor to `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.weights.iter().map(|w| g.leaf(w.clone(), trainable)).collect()
    }

    /// Runs `layers` on `x`. Dropout is applied only when `dropout_rng` is given.
    pub fn forward_range(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        params: &[NodeId],
        layers: Range<usize>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        let mut h = x;
        let mut logits = None;
        let mut code = None;
        let split = self.spec.encoder_layers();
        for i in layers {
            let p = self.offsets[i];
            h = match self.spec.layers[i] {
                LayerSpec::Conv { padding, activation, .. } => {
                    let y = g.conv2d(h, params[p], params[p + 1], padding)?;
                    apply(g, y, activation)?
                }
                LayerSpec::MaxPool => g.max_pool2x2(h)?,
                LayerSpec::AvgPool => g.avg_pool2x2(h)?,
                LayerSpec::Upsample => g.upsample2x2(h)?,
                LayerSpec::Dense { activation, .. } => {
                    let z = g.dense(h, params[p], params[p + 1])?;
                    if activation == LayerActivation::Softmax {
                        logits = Some(z);
                    }
                    apply(g, z, activation)?
                }
                LayerSpec::Dropout { rate } => match dropout_rng.as_deref_mut() {
                    Some(rng) => g.dropout(h, rate, rng)?,
                    None => h,
                },
                LayerSpec::GlobalAvgPool => g.global_avg_pool(h)?,
                LayerSpec::Flatten => g.flatten(h)?,
            };
            if split == Some(i + 1) {
                code = Some(h);
            }
        }
        Ok(Forward { output: h, logits, code })
    }

    /// Whole network on `x` with the given bound parameters.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        params: &[NodeId],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        self.forward_range(g, x, params, 0..self.spec.layers.len(), dropout_rng)
    }

    /// Pre-softmax logits of a classifier as a differentiable node.
    /// Counts as one logits query.
    pub fn logits_node(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        self.require_classifier()?;
        self.check_input(g.value(x).shape())?;
        let params = self.bind(g, false);
        let f = self.forward(g, x, &params, None)?;
        self.logits_queries.fetch_add(1, Ordering::Relaxed);
        Ok(f.logits.expect("classifier head"))
    }

    /// `(code, reconstruction)` nodes of an autoencoder applied to `x`.
    pub fn autoencoder_nodes(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        self.require_autoencoder()?;
        self.check_input(g.value(x).shape())?;
        let params = self.bind(g, false);
        let f = self.forward(g, x, &params, None)?;
        Ok((f.code.expect("encoder split"), f.output))
    }

    /// Leading-batch view of one image or a batch; errors on anything else.
    pub fn as_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        let want = &self.spec.input_shape[..];
        if s == want {
            return Ok(images.unsqueeze());
        }
        self.check_input(s)?;
        Ok(images.clone())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() == 4 && shape[1..] == self.spec.input_shape[..] {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "expected input [N,{},{},{}], got {shape:?}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
            )))
        }
    }

    fn require_classifier(&self) -> Result<()> {
        if self.spec.is_classifier() {
            Ok(())
        } else {
            Err(Error::Argument("operation needs a classifier".into()))
        }
    }

    fn require_autoencoder(&self) -> Result<()> {
        if self.spec.is_classifier() {
            Err(Error::Argument("operation needs an autoencoder".into()))
        } else {
            Ok(())
        }
    }

    /// Evaluation-mode pass over `images` in chunks, collecting `pick`'s node.
    fn eval_batched(
        &self,
        images: &Tensor<T>,
        layers: Range<usize>,
        pick: impl Fn(&Forward) -> NodeId,
    ) -> Result<Tensor<T>> {
        let batch = self.as_batch(images)?;
        let n = batch.batch_len();
        if n == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let x = g.constant(batch.select(&idx));
            let params = self.bind(&mut g, false);
            let f = self.forward_range(&mut g, x, &params, layers.clone(), None)?;
            parts.push(g.value(pick(&f)).clone());
            start = end;
        }
        let mut out = parts.remove(0);
        for p in &parts {
            out = Tensor::concat(&out, p)?;
        }
        Ok(out)
    }

    /// Class probabilities `[N,10]`.
    pub fn probabilities(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_classifier()?;
        self.eval_batched(images, 0..self.spec.layers.len(), |f| f.output)
    }

    /// Argmax labels for a batch; ties go to the lowest index.
    pub fn predict_labels(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.probabilities(images)?;
        let n = probs.batch_len();
        self.label_queries.fetch_add(n as u64, Ordering::Relaxed);
        Ok(probs.data().chunks(probs.len() / n).map(argmax).collect())
    }

    pub fn predict_label(&self, image: &Tensor<T>) -> Result<usize> {
        let labels = self.predict_labels(image)?;
        if labels.len() != 1 {
            return Err(Error::shape("predict_label takes a single image"));
        }
        Ok(labels[0])
    }

    /// Pre-softmax logits `[N,10]`.
    pub fn predict_logits_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_classifier()?;
        let z = self.eval_batched(images, 0..self.spec.layers.len(), |f| f.logits.expect("classifier head"))?;
        self.logits_queries.fetch_add(1, Ordering::Relaxed);
        Ok(z)
    }

    /// Pre-softmax logits `[10]` of one image.
    pub fn predict_logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.predict_logits_batch(image)?;
        if z.batch_len() != 1 {
            return Err(Error::shape("predict_logits takes a single image"));
        }
        Ok(z.batch_item(0))
    }

    /// Encoder output; one image gives `[h,w,c]`, a batch gives `[N,h,w,c]`.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_autoencoder()?;
        let split = self.spec.encoder_layers().expect("autoencoder");
        let out = self.eval_batched(images, 0..split, |f| f.output)?;
        Ok(unbatch_like(images, out, self.spec.input_shape.len()))
    }

    /// Full autoencoder output, same shape as the input.
    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_autoencoder()?;
        let out = self.eval_batched(images, 0..self.spec.layers.len(), |f| f.output)?;
        Ok(unbatch_like(images, out, self.spec.input_shape.len()))
    }
}

fn unbatch_like<T: Scalar>(input: &Tensor<T>, out: Tensor<T>, image_rank: usize) -> Tensor<T> {
    if input.rank() == image_rank {
        out.batch_item(0)
    } else {
        out
    }
}

fn apply<T: Scalar>(g: &mut Graph<T>, x: NodeId, act: LayerActivation) -> Result<NodeId> {
    match act {
        LayerActivation::None => Ok(x),
        LayerActivation::Relu => g.activation(x, Activation::Relu),
        LayerActivation::Sigmoid => g.activation(x, Activation::Sigmoid),
        LayerActivation::Softmax => g.activation(x, Activation::Softmax),
    }
}
