//! Twin network with a shared extractor, an L1-merge decision head, the pair
//! cross-entropy loss and the distance-ratio loss.
//!
//! Both twins read the same `extractor` layers, so weight sharing is
//! structural. The head consumes `|e − e'|` and ends in a single sigmoid unit.
//!
//! The distance-ratio loss for a batch with mean same-class embedding distance
//! `S` and mean different-class distance `D` is `(D + S) / (D − S)`. It only
//! depends on the extractor, so its gradient set carries no head entries.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, backward_accumulate, check_len, forward, Activation, DenseLayer, FreezeMask,
    AdamConfig, GradientSet, LayerGrad, OptimizerState, Trace,
};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

/// `D − S` at or below this is treated as a degenerate denominator.
pub const DEGENERATE_GAP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output widths of the extractor layers, all ReLU.
    pub extractor_dims: Vec<usize>,
    /// Width of the ReLU layer between the merge and the sigmoid output.
    pub head_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 64,
            extractor_dims: vec![64, 32, 16],
            head_hidden: 16,
        }
    }
}

impl Architecture {
    /// Scaled-down topology used by the gradient checks.
    pub fn small() -> Self {
        Self {
            input_dim: 8,
            extractor_dims: vec![8, 4, 2],
            head_hidden: 2,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.extractor_dims.last().unwrap_or(&self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.head_hidden == 0
            || self.extractor_dims.is_empty()
            || self.extractor_dims.contains(&0)
        {
            return Err(Error::InvalidConfig(format!(
                "architecture needs positive widths and at least one extractor layer: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiameseParams {
    /// Extractor layers followed by head layers.
    layers: Vec<DenseLayer>,
    extractor_depth: usize,
}

impl SiameseParams {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(arch, &mut rng)
    }

    pub fn init_with_rng<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut dims = vec![arch.input_dim];
        dims.extend_from_slice(&arch.extractor_dims);
        let extractor_depth = arch.extractor_dims.len();
        let mut acts = vec![Activation::Relu; extractor_depth];
        let mut layers = nn::init_params_with_rng(&dims, &acts, rng)?;
        acts = vec![Activation::Relu, Activation::Sigmoid];
        layers.extend(nn::init_params_with_rng(
            &[arch.embedding_dim(), arch.head_hidden, 1],
            &acts,
            rng,
        )?);
        Ok(Self {
            layers,
            extractor_depth,
        })
    }

    /// Assembles parameters from explicit layers, checking that the extractor
    /// chains, the head starts at the embedding width and ends in one sigmoid.
    pub fn from_layers(extractor: Vec<DenseLayer>, head: Vec<DenseLayer>) -> Result<Self> {
        if extractor.is_empty() || head.is_empty() {
            return Err(Error::InvalidConfig("extractor and head must be non-empty".into()));
        }
        let layers: Vec<DenseLayer> = extractor.iter().chain(&head).cloned().collect();
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        let last = layers.last().expect("non-empty");
        if last.out_dim() != 1 || last.activation() != Activation::Sigmoid {
            return Err(Error::InvalidConfig(
                "decision head must end in a single sigmoid unit".into(),
            ));
        }
        Ok(Self {
            extractor_depth: extractor.len(),
            layers,
        })
    }

    /// Re-checks the structural invariants of parameters that did not come
    /// from [`SiameseParams::init`] or [`SiameseParams::from_layers`], e.g.
    /// after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.extractor_depth == 0 || self.extractor_depth >= self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "extractor depth {} does not fit {} layers",
                self.extractor_depth,
                self.layers.len()
            )));
        }
        let rebuilt = self
            .layers
            .iter()
            .map(|l| DenseLayer::new(l.weights().to_vec(), l.biases().to_vec(), l.in_dim(), l.activation()))
            .collect::<Result<Vec<_>>>()?;
        if rebuilt.iter().zip(&self.layers).any(|(r, l)| r.out_dim() != l.out_dim()) {
            return Err(Error::Shape("layer output size disagrees with its biases".into()));
        }
        let head = rebuilt[self.extractor_depth..].to_vec();
        let mut extractor = rebuilt;
        extractor.truncate(self.extractor_depth);
        Self::from_layers(extractor, head)?;
        if !self.is_finite() {
            return Err(Error::NumericInstability("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn extractor(&self) -> &[DenseLayer] {
        &self.layers[..self.extractor_depth]
    }

    pub fn head(&self) -> &[DenseLayer] {
        &self.layers[self.extractor_depth..]
    }

    pub fn extractor_depth(&self) -> usize {
        self.extractor_depth
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.extractor_depth - 1].out_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    /// Embedding `g(x)`.
    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("extractor input", x.len(), self.input_dim())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        let mut h = x.to_vec();
        for layer in self.extractor() {
            h = layer.eval(&h)?;
        }
        Ok(h)
    }

    /// Head output on two precomputed embeddings, clamped into
    /// `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn similarity_from_embeddings(&self, e: &[f64], e_other: &[f64]) -> Result<f64> {
        check_len("embedding", e.len(), self.embedding_dim())?;
        check_len("embedding", e_other.len(), self.embedding_dim())?;
        let mut h: Vec<f64> = e.iter().zip(e_other).map(|(a, b)| (a - b).abs()).collect();
        for layer in self.head() {
            h = layer.eval(&h)?;
        }
        Ok(clamp_prob(h[0]))
    }

    pub fn similarity(&self, x: &[f64], x_other: &[f64]) -> Result<f64> {
        let e = self.extract(x)?;
        let e_other = self.extract(x_other)?;
        self.similarity_from_embeddings(&e, &e_other)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy of a clamped probability against a same/different
/// label (`true` = same class).
pub fn bce_loss(p: f64, same_class: bool) -> f64 {
    let p = clamp_prob(p);
    if same_class {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same_class: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn new(pairs: Vec<Pair>) -> Self {
        Self { pairs }
    }

    /// Number of same-class pairs.
    pub fn same_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.same_class).count()
    }

    /// Number of different-class pairs.
    pub fn different_count(&self) -> usize {
        self.pairs.len() - self.same_count()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn check_indices(&self, available: usize) -> Result<()> {
        if let Some(p) = self.pairs.iter().find(|p| p.a >= available || p.b >= available) {
            return Err(Error::InvalidBatch(format!(
                "pair ({}, {}) references a sample outside 0..{available}",
                p.a, p.b
            )));
        }
        Ok(())
    }
}

/// Mean same-class and different-class embedding distances of a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceStats {
    pub same_mean: f64,
    pub different_mean: f64,
}

impl DistanceStats {
    pub fn ratio(&self) -> Result<f64> {
        let gap = self.different_mean - self.same_mean;
        if gap <= DEGENERATE_GAP || !gap.is_finite() {
            return Err(Error::DegenerateDenominator { gap });
        }
        Ok((self.different_mean + self.same_mean) / gap)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn distance_stats(embeddings: &[Vec<f64>], batch: &PairBatch) -> Result<DistanceStats> {
    batch.check_indices(embeddings.len())?;
    let (s, d) = (batch.same_count(), batch.different_count());
    if s == 0 || d == 0 {
        return Err(Error::InvalidBatch(format!(
            "distance loss needs same- and different-class pairs (got {s} same, {d} different)"
        )));
    }
    let (mut same, mut diff) = (0.0, 0.0);
    for p in &batch.pairs {
        let dist = euclidean(&embeddings[p.a], &embeddings[p.b]);
        if p.same_class {
            same += dist;
        } else {
            diff += dist;
        }
    }
    Ok(DistanceStats {
        same_mean: same / s as f64,
        different_mean: diff / d as f64,
    })
}

/// `(D + S) / (D − S)` over the embeddings referenced by `batch`.
pub fn distance_loss(embeddings: &[Vec<f64>], batch: &PairBatch) -> Result<f64> {
    distance_stats(embeddings, batch)?.ratio()
}

fn extract_traces(params: &SiameseParams, inputs: &[Vec<f64>], batch: &PairBatch) -> Result<Vec<Option<Trace>>> {
    let mut traces: Vec<Option<Trace>> = vec![None; inputs.len()];
    for p in &batch.pairs {
        for idx in [p.a, p.b] {
            if traces[idx].is_none() {
                traces[idx] = Some(forward(params.extractor(), &inputs[idx])?);
            }
        }
    }
    Ok(traces)
}

/// Distance-ratio loss and its gradient. Head layers are `None` in the
/// returned set.
pub fn distance_loss_grad(
    params: &SiameseParams,
    inputs: &[Vec<f64>],
    batch: &PairBatch,
) -> Result<(f64, GradientSet)> {
    batch.check_indices(inputs.len())?;
    let traces = extract_traces(params, inputs, batch)?;
    let dim = params.embedding_dim();
    let embeddings: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| t.as_ref().map_or_else(|| vec![0.0; dim], |t| t.output().to_vec()))
        .collect();
    let stats = distance_stats(&embeddings, batch)?;
    let loss = stats.ratio()?;

    let (s_mean, d_mean) = (stats.same_mean, stats.different_mean);
    let gap2 = (d_mean - s_mean).powi(2);
    // ∂L/∂S and ∂L/∂D by the quotient rule.
    let dl_ds = 2.0 * d_mean / gap2;
    let dl_dd = -2.0 * s_mean / gap2;
    let s_count = batch.same_count() as f64;
    let d_count = batch.different_count() as f64;

    let mut emb_grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    for p in &batch.pairs {
        let (ea, eb) = (&embeddings[p.a], &embeddings[p.b]);
        let dist = euclidean(ea, eb);
        if dist == 0.0 {
            // Subgradient 0 at coincident embeddings.
            continue;
        }
        let coef = if p.same_class { dl_ds / s_count } else { dl_dd / d_count } / dist;
        for (idx, sign) in [(p.a, 1.0), (p.b, -1.0)] {
            let g = emb_grads[idx].get_or_insert_with(|| vec![0.0; dim]);
            for k in 0..dim {
                g[k] += sign * coef * (ea[k] - eb[k]);
            }
        }
    }

    let mut grads: Vec<LayerGrad> = params.extractor().iter().map(LayerGrad::zeros_like).collect();
    for (idx, g) in emb_grads.iter().enumerate() {
        if let (Some(g), Some(trace)) = (g, &traces[idx]) {
            backward_accumulate(params.extractor(), trace, g, &mut grads)?;
        }
    }
    let mut layers: Vec<Option<LayerGrad>> = grads.into_iter().map(Some).collect();
    layers.extend(std::iter::repeat_n(None, params.head().len()));
    Ok((loss, GradientSet { layers }))
}

/// Mean BCE over the batch and its gradient over every layer.
pub fn bce_batch_grad(
    params: &SiameseParams,
    inputs: &[Vec<f64>],
    batch: &PairBatch,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidBatch("empty pair batch".into()));
    }
    batch.check_indices(inputs.len())?;
    let traces = extract_traces(params, inputs, batch)?;
    let depth = params.extractor_depth();
    let mut ext_grads: Vec<LayerGrad> = params.extractor().iter().map(LayerGrad::zeros_like).collect();
    let mut head_grads: Vec<LayerGrad> = params.head().iter().map(LayerGrad::zeros_like).collect();
    let mut emb_grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    let n = batch.len() as f64;
    let mut total = 0.0;

    for p in &batch.pairs {
        let ea = traces[p.a].as_ref().expect("traced").output();
        let eb = traces[p.b].as_ref().expect("traced").output();
        let merged: Vec<f64> = ea.iter().zip(eb).map(|(a, b)| (a - b).abs()).collect();
        let head_trace = forward(params.head(), &merged)?;
        let raw = head_trace.output()[0];
        let prob = clamp_prob(raw);
        total += bce_loss(prob, p.same_class);
        if raw != prob {
            // Clamped: the loss is locally constant.
            continue;
        }
        let dl_dp = if p.same_class { -1.0 / prob } else { 1.0 / (1.0 - prob) } / n;
        let dl_dm = backward_accumulate(params.head(), &head_trace, &[dl_dp], &mut head_grads)?;
        let dim = ea.len();
        for (idx, sign) in [(p.a, 1.0), (p.b, -1.0)] {
            let g = emb_grads[idx].get_or_insert_with(|| vec![0.0; dim]);
            for k in 0..dim {
                let diff = ea[k] - eb[k];
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g[k] += sign * s * dl_dm[k];
            }
        }
    }
    for (idx, g) in emb_grads.iter().enumerate() {
        if let (Some(g), Some(trace)) = (g, &traces[idx]) {
            backward_accumulate(params.extractor(), trace, g, &mut ext_grads)?;
        }
    }
    debug_assert_eq!(ext_grads.len(), depth);
    ext_grads.extend(head_grads);
    Ok((total / n, GradientSet::full(ext_grads)))
}

/// Options for one pair-batch training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepConfig {
    pub use_distance_loss: bool,
    pub freeze: FreezeMask,
}

/// Adam state for the two updates of a training step. The BCE and
/// distance-loss updates keep separate moments so that distance gradients
/// never enter the momentum of the BCE update (and vice versa).
#[derive(Clone, Debug, PartialEq)]
pub struct PairOptimizer {
    pub bce: OptimizerState,
    pub distance: OptimizerState,
}

impl PairOptimizer {
    /// Both updates use `adam`; the distance update uses
    /// `distance_learning_rate` instead when given.
    pub fn new(params: &SiameseParams, adam: AdamConfig, distance_learning_rate: Option<f64>) -> Self {
        let distance = AdamConfig {
            learning_rate: distance_learning_rate.unwrap_or(adam.learning_rate),
            ..adam
        };
        Self {
            bce: OptimizerState::new(params.layers(), adam),
            distance: OptimizerState::new(params.layers(), distance),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchMetrics {
    /// Mean BCE before the update.
    pub bce: f64,
    /// Distance-ratio loss evaluated with the post-BCE parameters, right
    /// before the distance update. `None` when the step was not attempted or
    /// the denominator was degenerate.
    pub distance_loss: Option<f64>,
    pub distance_skipped: bool,
}

/// BCE update over all unfrozen layers, then (optionally) a separate
/// distance-loss update over the unfrozen extractor layers.
pub fn train_pair_batch(
    params: &mut SiameseParams,
    optimizer: &mut PairOptimizer,
    inputs: &[Vec<f64>],
    batch: &PairBatch,
    config: &StepConfig,
) -> Result<BatchMetrics> {
    if config.freeze.frozen_layer_count >= params.layers.len() {
        return Err(Error::InvalidConfig(format!(
            "freezing {} of {} layers leaves nothing to train",
            config.freeze.frozen_layer_count,
            params.layers.len()
        )));
    }
    let (bce, grads) = bce_batch_grad(params, inputs, batch)?;
    optimizer.bce.apply_update(&mut params.layers, &grads, config.freeze)?;
    let mut metrics = BatchMetrics {
        bce,
        ..Default::default()
    };
    if !config.use_distance_loss {
        return Ok(metrics);
    }
    match distance_loss_grad(params, inputs, batch) {
        Ok((loss, grads)) => {
            optimizer.distance.apply_update(&mut params.layers, &grads, config.freeze)?;
            metrics.distance_loss = Some(loss);
        }
        Err(Error::DegenerateDenominator { .. }) => metrics.distance_skipped = true,
        Err(e) => return Err(e),
    }
    Ok(metrics)
}
