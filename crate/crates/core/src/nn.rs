//! Dense feed-forward network with softmax cross-entropy, exact
//! backpropagation and mask-aware SGD. This is the local training engine
//! run on every client.
//!
//! All parameters of a model live in one flat [`ParameterVector`]. The
//! [`Layout`] maps that vector onto layers: for each layer a weight segment
//! (row-major `[fan_in, fan_out]`) followed by a bias segment.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Domain(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Layout {
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("tensor contains non-finite values".into()));
        }
        Ok(Tensor { shape, values })
    }

    /// 2-D constructor for the common `[rows, cols]` case.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a row, i.e. the product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    /// `layer_sizes` is `[d_in, hidden.., num_classes]`.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        Self::with_activation(layer_sizes, Activation::Relu)
    }

    pub fn with_activation(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(ModelSpec {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layout(&self) -> Layout {
        Layout::for_spec(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        let mut segments = Vec::with_capacity(2 * spec.depth());
        let mut offset = 0;
        for (layer, w) in spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            for (kind, len) in [
                (SegmentKind::Weight, fan_in * fan_out),
                (SegmentKind::Bias, fan_out),
            ] {
                segments.push(Segment {
                    layer,
                    kind,
                    offset,
                    len,
                });
                offset += len;
            }
        }
        Layout {
            segments,
            len: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn weight(&self, layer: usize) -> Segment {
        self.segments[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> Segment {
        self.segments[2 * layer + 1]
    }

    /// Per-index flag: true for weights, false for biases.
    pub fn prunable_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.len];
        for seg in self.segments.iter().filter(|s| s.kind == SegmentKind::Weight) {
            flags[seg.range()].fill(true);
        }
        flags
    }

    pub fn prunable_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Weight)
            .map(|s| s.len)
            .sum()
    }
}

/// Flattened model weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        check_len(&layout, values.len())?;
        Ok(ParameterVector { values, layout })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let layout = Arc::new(spec.layout());
        ParameterVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, seg: Segment) -> &[f64] {
        &self.values[seg.range()]
    }
}

/// Flattened update transmitted by a client. Same layout as the parameters
/// it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        check_len(&layout, values.len())?;
        Ok(GradientVector { values, layout })
    }

    pub fn zeros_like(params: &ParameterVector) -> Self {
        GradientVector {
            values: vec![0.0; params.len()],
            layout: Arc::clone(&params.layout),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_len(layout: &Layout, actual: usize) -> Result<()> {
    if layout.len() != actual {
        return Err(Error::Layout {
            expected: layout.len(),
            actual,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Tensor,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Domain(format!(
                "batch features must be 2-D, got shape {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Layout {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        Ok(Batch { features, labels })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut params = ParameterVector::zeros(spec);
    let mut stream = rng::stream(seed, &[rng::domain::INIT]);
    let layout = Arc::clone(&params.layout);
    for layer in 0..spec.depth() {
        let bound = 1.0 / (spec.layer_sizes[layer] as f64).sqrt();
        for w in &mut params.values[layout.weight(layer).range()] {
            *w = stream.random_range(-bound..bound);
        }
    }
    params
}

fn check_compatible(params: &ParameterVector, spec: &ModelSpec) -> Result<()> {
    check_len(&spec.layout(), params.len())
}

fn check_batch(spec: &ModelSpec, batch: &Batch) -> Result<()> {
    if batch.features.cols() != spec.input_dim() {
        return Err(Error::InputShape {
            expected: spec.input_dim(),
            actual: batch.features.cols(),
        });
    }
    let c = spec.num_classes();
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidLabel {
            label,
            num_classes: c,
        });
    }
    Ok(())
}

/// `out[b, j] = bias[j] + sum_i input[b, i] * weight[i, j]`
fn affine(input: &[f64], rows: usize, fan_in: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let fan_out = bias.len();
    let mut out = Vec::with_capacity(rows * fan_out);
    for r in 0..rows {
        out.extend_from_slice(bias);
        let o = &mut out[r * fan_out..];
        for (i, &x) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (oj, &wij) in o.iter_mut().zip(&weight[i * fan_out..(i + 1) * fan_out]) {
                *oj += x * wij;
            }
        }
    }
    out
}

/// Activations of every layer: `acts[0]` is the input, `acts[depth]` the
/// logits, hidden entries are post-ReLU.
fn forward_trace(params: &ParameterVector, spec: &ModelSpec, input: &[f64], rows: usize) -> Vec<Vec<f64>> {
    let layout = &params.layout;
    let mut acts = Vec::with_capacity(spec.depth() + 1);
    acts.push(input.to_vec());
    for layer in 0..spec.depth() {
        let mut z = affine(
            &acts[layer],
            rows,
            spec.layer_sizes[layer],
            params.segment(layout.weight(layer)),
            params.segment(layout.bias(layer)),
        );
        if layer + 1 < spec.depth() {
            match spec.activation {
                Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        acts.push(z);
    }
    acts
}

pub fn forward(params: &ParameterVector, spec: &ModelSpec, batch: &Batch) -> Result<Tensor> {
    check_compatible(params, spec)?;
    if batch.features.cols() != spec.input_dim() {
        return Err(Error::InputShape {
            expected: spec.input_dim(),
            actual: batch.features.cols(),
        });
    }
    let rows = batch.len();
    let logits = forward_trace(params, spec, batch.features.values(), rows).pop().unwrap();
    Tensor::matrix(rows, spec.num_classes(), logits)
}

/// Cross-entropy of one row of logits, computed through a shifted
/// log-sum-exp. Also writes the softmax into `probs`.
fn softmax_xent(logits: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    max + sum.ln() - logits[label]
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(f64, GradientVector)> {
    check_compatible(params, spec)?;
    check_batch(spec, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let rows = batch.len();
    let classes = spec.num_classes();
    let acts = forward_trace(params, spec, batch.features.values(), rows);
    let logits = &acts[spec.depth()];

    let inv_b = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut delta = vec![0.0; rows * classes];
    for (r, &label) in batch.labels.iter().enumerate() {
        let d = &mut delta[r * classes..(r + 1) * classes];
        loss += softmax_xent(&logits[r * classes..(r + 1) * classes], label, d);
        d[label] -= 1.0;
        d.iter_mut().for_each(|v| *v *= inv_b);
    }
    loss *= inv_b;

    let layout = Arc::clone(&params.layout);
    let mut grad = GradientVector::zeros_like(params);
    for layer in (0..spec.depth()).rev() {
        let fan_in = spec.layer_sizes[layer];
        let fan_out = spec.layer_sizes[layer + 1];
        let input = &acts[layer];

        let gw = &mut grad.values[layout.weight(layer).range()];
        for r in 0..rows {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            for (i, &x) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (g, &dj) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(d) {
                    *g += x * dj;
                }
            }
        }
        let gb = &mut grad.values[layout.bias(layer).range()];
        for r in 0..rows {
            for (g, &dj) in gb.iter_mut().zip(&delta[r * fan_out..(r + 1) * fan_out]) {
                *g += dj;
            }
        }

        if layer > 0 {
            let weight = params.segment(layout.weight(layer));
            let mut prev = vec![0.0; rows * fan_in];
            for r in 0..rows {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                for i in 0..fan_in {
                    // ReLU passes gradient only where the activation was positive.
                    if input[r * fan_in + i] > 0.0 {
                        prev[r * fan_in + i] = weight[i * fan_out..(i + 1) * fan_out]
                            .iter()
                            .zip(d)
                            .map(|(w, dj)| w * dj)
                            .sum();
                    }
                }
            }
            delta = prev;
        }
    }
    Ok((loss, grad))
}

/// `params - lr * grad`, with dropped coordinates forced to exactly zero.
pub fn sgd_step(
    params: &ParameterVector,
    grad: &GradientVector,
    lr: f64,
    mask: Option<&PruneMask>,
) -> Result<ParameterVector> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    check_len(&params.layout, grad.len())?;
    let mut next = params.clone();
    for (w, g) in next.values.iter_mut().zip(&grad.values) {
        *w -= lr * g;
    }
    if let Some(mask) = mask {
        check_len(&params.layout, mask.len())?;
        for (w, keep) in next.values.iter_mut().zip(mask.keep_flags()) {
            if !keep {
                *w = 0.0;
            }
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (j, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = j;
        }
    }
    best
}

const EVAL_CHUNK: usize = 1024;

pub fn evaluate(params: &ParameterVector, spec: &ModelSpec, dataset: &Dataset) -> Result<Evaluation> {
    check_compatible(params, spec)?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyInput("dataset"));
    }
    if dataset.feature_dim() != spec.input_dim() {
        return Err(Error::InputShape {
            expected: spec.input_dim(),
            actual: dataset.feature_dim(),
        });
    }
    let classes = spec.num_classes();
    let d = dataset.feature_dim();
    let features = dataset.features().values();
    let labels = dataset.labels();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel {
            label,
            num_classes: classes,
        });
    }

    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut probs = vec![0.0; classes];
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let logits = forward_trace(params, spec, &features[start * d..end * d], end - start)
            .pop()
            .unwrap();
        for (row, &label) in logits.chunks_exact(classes).zip(&labels[start..end]) {
            if argmax(row) == label {
                correct += 1;
            }
            loss += softmax_xent(row, label, &mut probs);
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss / n as f64,
    })
}
