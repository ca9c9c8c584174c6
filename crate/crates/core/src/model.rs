//! Desk-scale multiclass models over flat parameter vectors.
//!
//! Two architectures are supported: a softmax-linear classifier and a
//! one-hidden-layer ReLU network. Both are trained with mini-batch SGD on the
//! cross-entropy loss.
//!
//! Parameter layout (row-major):
//!
//! - softmax-linear: `W[num_classes][input_dim]`, `b[num_classes]`
//! - mlp: `W1[hidden][input_dim]`, `b1[hidden]`, `W2[num_classes][hidden]`, `b2[num_classes]`

use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat real-valued model parameters. Also used for update deltas.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_l2(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::input(format!(
                "parameter dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    /// `self + other`
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    /// `self - other`
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Arithmetic mean of equally-sized vectors, summed in the given order.
    pub fn mean<'a, I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ParameterVector>,
    {
        let mut iter = vectors.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::input("cannot average an empty list of vectors"))?;
        let mut acc = first.clone();
        let mut n = 1usize;
        for v in iter {
            acc.axpy(1.0, v)?;
            n += 1;
        }
        let inv = 1.0 / n as f64;
        for a in acc.0.iter_mut() {
            *a *= inv;
        }
        Ok(acc)
    }
}

impl Index<usize> for ParameterVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParameterVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SoftmaxLinear,
    Mlp { hidden_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn softmax_linear(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxLinear,
            input_dim,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden_dim },
            input_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least 2 classes"));
        }
        if let ModelKind::Mlp { hidden_dim: 0 } = self.kind {
            return Err(Error::config("mlp hidden_dim must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::SoftmaxLinear => d * c + c,
            ModelKind::Mlp { hidden_dim: h } => d * h + h + h * c + c,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ModelKind::SoftmaxLinear => "softmax-linear",
            ModelKind::Mlp { .. } => "mlp",
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self.kind {
            ModelKind::SoftmaxLinear => 0,
            ModelKind::Mlp { hidden_dim } => hidden_dim,
        }
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(Error::input(format!(
                "parameter vector has {} entries, model expects {}",
                params.dim(),
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::input(format!(
                "feature vector has {} entries, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dim = first.features.len();
            for (i, s) in samples.iter().enumerate() {
                if s.features.len() != dim {
                    return Err(Error::input(format!(
                        "sample {i} has {} features, expected {dim}",
                        s.features.len()
                    )));
                }
                if s.label >= num_classes {
                    return Err(Error::input(format!(
                        "sample {i} has label {} outside [0, {num_classes})",
                        s.label
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn empty(num_classes: usize) -> Self {
        Self {
            samples: Vec::new(),
            num_classes,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.num_classes != spec.num_classes {
            return Err(Error::input(format!(
                "dataset has {} classes, model has {}",
                self.num_classes, spec.num_classes
            )));
        }
        if let Some(d) = self.input_dim() {
            if d != spec.input_dim {
                return Err(Error::input(format!(
                    "dataset features have {d} entries, model expects {}",
                    spec.input_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Seeded uniform initialization in `[-0.05, 0.05]`.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ParameterVector(
        (0..spec.param_count())
            .map(|_| rng.random_range(-0.05..=0.05))
            .collect(),
    )
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Forward pass scratch; reused across samples to avoid reallocating.
struct Activations {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl Activations {
    fn new(spec: &ModelSpec) -> Self {
        let h = spec.hidden_dim();
        Self {
            hidden_pre: vec![0.0; h],
            hidden: vec![0.0; h],
            probs: vec![0.0; spec.num_classes],
        }
    }
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, b)) in out
        .iter_mut()
        .zip(weights.chunks_exact(n_in).zip(bias.iter()))
    {
        *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
    }
}

/// Fills `act.probs` with the class distribution (after softmax).
fn forward_into(spec: &ModelSpec, p: &[f64], x: &[f64], act: &mut Activations) {
    let (d, c) = (spec.input_dim, spec.num_classes);
    match spec.kind {
        ModelKind::SoftmaxLinear => {
            let (w, b) = p.split_at(d * c);
            affine(w, b, x, &mut act.probs);
        }
        ModelKind::Mlp { hidden_dim: h } => {
            let (w1, rest) = p.split_at(d * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h * c);
            affine(w1, b1, x, &mut act.hidden_pre);
            for (a, z) in act.hidden.iter_mut().zip(&act.hidden_pre) {
                *a = z.max(0.0);
            }
            affine(w2, b2, &act.hidden, &mut act.probs);
        }
    }
    softmax_in_place(&mut act.probs);
}

/// Class probabilities for one feature vector.
pub fn forward(spec: &ModelSpec, params: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let mut act = Activations::new(spec);
    forward_into(spec, params.as_slice(), x, &mut act);
    Ok(act.probs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Most probable class; ties go to the lowest index.
pub fn predict(spec: &ModelSpec, params: &ParameterVector, x: &[f64]) -> Result<usize> {
    Ok(argmax(&forward(spec, params, x)?))
}

fn sample_loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

/// Adds the cross-entropy gradient of one sample into `grad`; returns its loss.
fn accumulate_gradient(
    spec: &ModelSpec,
    p: &[f64],
    sample: &Sample,
    grad: &mut [f64],
    act: &mut Activations,
) -> f64 {
    let x = &sample.features;
    forward_into(spec, p, x, act);
    let loss = sample_loss(&act.probs, sample.label);
    // dL/dz = probs - onehot(label)
    act.probs[sample.label] -= 1.0;
    let g_out = &act.probs;
    let (d, c) = (spec.input_dim, spec.num_classes);
    match spec.kind {
        ModelKind::SoftmaxLinear => {
            let (gw, gb) = grad.split_at_mut(d * c);
            for (k, g) in g_out.iter().enumerate() {
                for (gwi, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *gwi += g * xi;
                }
                gb[k] += g;
            }
        }
        ModelKind::Mlp { hidden_dim: h } => {
            let w2 = &p[d * h + h..d * h + h + h * c];
            let (gw1, rest) = grad.split_at_mut(d * h);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(h * c);
            for (k, g) in g_out.iter().enumerate() {
                for (gwi, a) in gw2[k * h..(k + 1) * h].iter_mut().zip(&act.hidden) {
                    *gwi += g * a;
                }
                gb2[k] += g;
            }
            for j in 0..h {
                if act.hidden_pre[j] <= 0.0 {
                    continue;
                }
                let gh: f64 = (0..c).map(|k| w2[k * h + j] * g_out[k]).sum();
                for (gwi, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gwi += gh * xi;
                }
                gb1[j] += gh;
            }
        }
    }
    loss
}

/// Mean cross-entropy gradient over `batch`, together with the mean loss.
pub fn gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &[&Sample],
) -> Result<(ParameterVector, f64)> {
    spec.check_params(params)?;
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    for s in batch {
        spec.check_input(&s.features)?;
        if s.label >= spec.num_classes {
            return Err(Error::input(format!("label {} out of range", s.label)));
        }
    }
    let mut grad = vec![0.0; params.dim()];
    let mut act = Activations::new(spec);
    let mut loss = 0.0;
    for s in batch {
        loss += accumulate_gradient(spec, params.as_slice(), s, &mut grad, &mut act);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((ParameterVector(grad), loss * inv))
}

/// Mean cross-entropy of `params` over a dataset.
pub fn loss(spec: &ModelSpec, params: &ParameterVector, data: &Dataset) -> Result<f64> {
    spec.check_params(params)?;
    data.check_against(spec)?;
    if data.is_empty() {
        return Err(Error::input("loss of an empty dataset is undefined"));
    }
    let mut act = Activations::new(spec);
    let total: f64 = data
        .samples()
        .iter()
        .map(|s| {
            forward_into(spec, params.as_slice(), &s.features, &mut act);
            sample_loss(&act.probs, s.label)
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// One SGD step: `params - lr * mean_grad(batch)`.
pub fn sgd_step(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &[&Sample],
    learning_rate: f64,
) -> Result<ParameterVector> {
    let (grad, _) = gradient(spec, params, batch)?;
    let mut next = params.clone();
    next.axpy(-learning_rate, &grad)?;
    Ok(next)
}

/// Without-replacement batch sampler that reshuffles at the start of every
/// pass. A pass ends when fewer than `batch_size` unseen indices remain.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::input("batch_size must be positive"));
        }
        if batch_size > len {
            return Err(Error::input(format!(
                "batch_size {batch_size} exceeds dataset size {len}"
            )));
        }
        Ok(Self {
            order: (0..len).collect(),
            cursor: len,
            batch_size,
        })
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}

/// Runs `steps` SGD iterations in place, drawing batches from `sampler`.
pub fn train_steps<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &mut ParameterVector,
    data: &Dataset,
    sampler: &mut BatchSampler,
    steps: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<()> {
    spec.check_params(params)?;
    data.check_against(spec)?;
    let samples = data.samples();
    let mut grad = vec![0.0; params.dim()];
    let mut act = Activations::new(spec);
    for _ in 0..steps {
        let batch = sampler.next_batch(rng);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in batch {
            accumulate_gradient(spec, params.as_slice(), &samples[i], &mut grad, &mut act);
        }
        let step = learning_rate / batch.len() as f64;
        for (p, g) in params.as_mut_slice().iter_mut().zip(&grad) {
            *p -= step * g;
        }
    }
    Ok(())
}

/// Local client training: `cfg.iterations` batch-SGD steps from `w0`.
/// Returns the update `w_I - w_0`.
pub fn local_train<R: Rng + ?Sized>(
    spec: &ModelSpec,
    w0: &ParameterVector,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ParameterVector> {
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::input("learning rate must be positive"));
    }
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size)?;
    let mut w = w0.clone();
    train_steps(spec, &mut w, data, &mut sampler, cfg.iterations, cfg.learning_rate, rng)?;
    if !w.is_finite() {
        return Err(Error::input("training diverged to non-finite parameters"));
    }
    w.sub(w0)
}

/// Per-class correct/total counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassAccuracy {
    pub correct: Vec<usize>,
    pub count: Vec<usize>,
}

impl ClassAccuracy {
    /// `None` when the class has no samples.
    pub fn accuracy(&self, class: usize) -> Option<f64> {
        match self.count[class] {
            0 => None,
            n => Some(self.correct[class] as f64 / n as f64),
        }
    }

    pub fn accuracies(&self) -> Vec<Option<f64>> {
        (0..self.count.len()).map(|c| self.accuracy(c)).collect()
    }

    /// Overall accuracy across all samples; 0 for an empty set.
    pub fn overall(&self) -> f64 {
        let n: usize = self.count.iter().sum();
        if n == 0 {
            return 0.0;
        }
        self.correct.iter().sum::<usize>() as f64 / n as f64
    }
}

pub fn evaluate_per_class(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &Dataset,
) -> Result<ClassAccuracy> {
    spec.check_params(params)?;
    data.check_against(spec)?;
    let mut correct = vec![0; spec.num_classes];
    let mut count = vec![0; spec.num_classes];
    let mut act = Activations::new(spec);
    for s in data.samples() {
        forward_into(spec, params.as_slice(), &s.features, &mut act);
        count[s.label] += 1;
        if argmax(&act.probs) == s.label {
            correct[s.label] += 1;
        }
    }
    Ok(ClassAccuracy { correct, count })
}

/// Predicted classes for every sample, in order.
pub fn predict_all(spec: &ModelSpec, params: &ParameterVector, samples: &[Sample]) -> Result<Vec<usize>> {
    spec.check_params(params)?;
    let mut act = Activations::new(spec);
    samples
        .iter()
        .map(|s| {
            spec.check_input(&s.features)?;
            forward_into(spec, params.as_slice(), &s.features, &mut act);
            Ok(argmax(&act.probs))
        })
        .collect()
}
