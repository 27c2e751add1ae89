//! Dense feedforward substrate.
//!
//! Layers are stored row-major (`out_dim × in_dim`) in plain `Vec<f64>`s. The
//! topologies involved are tiny (at most 64 wide), so a hand-written loop is
//! both fast enough and easy to check against finite differences.
//!
//! Freezing is applied when parameters are updated, never when gradients are
//! computed: `backward` always produces a gradient for every layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation, given both the
    /// pre-activation `z` and the activation output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major, `out_dim × in_dim`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        weights: Vec<f64>,
        biases: Vec<f64>,
        in_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let out_dim = biases.len();
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "layer dimensions must be positive (got {in_dim}→{out_dim})"
            )));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::Shape(format!(
                "weight matrix has {} entries, expected {out_dim}×{in_dim}",
                weights.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
            activation,
        }
    }

    /// He-uniform for ReLU, Glorot-uniform otherwise. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = init_bound(in_dim, out_dim, activation);
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            biases: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }

    /// Writes pre-activations into `pre` and activations into `post`.
    fn eval_into(&self, input: &[f64], pre: &mut [f64], post: &mut [f64]) {
        for (row, (z, a)) in pre.iter_mut().zip(post.iter_mut()).enumerate() {
            let w = &self.weights[row * self.in_dim..(row + 1) * self.in_dim];
            let dot: f64 = w.iter().zip(input).map(|(w, x)| w * x).sum();
            *z = dot + self.biases[row];
            *a = self.activation.apply(*z);
        }
    }

    /// Activation output only.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("layer input", input.len(), self.in_dim)?;
        let mut pre = vec![0.0; self.out_dim];
        let mut post = vec![0.0; self.out_dim];
        self.eval_into(input, &mut pre, &mut post);
        Ok(post)
    }
}

fn init_bound(in_dim: usize, out_dim: usize, activation: Activation) -> f64 {
    match activation {
        Activation::Relu => (6.0 / in_dim as f64).sqrt(),
        Activation::Sigmoid | Activation::Identity => (6.0 / (in_dim + out_dim) as f64).sqrt(),
    }
}

pub(crate) fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Shape(format!(
            "{what} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// Builds one layer per consecutive pair in `dims` with the given activations,
/// drawing weights from a ChaCha stream seeded with `seed`.
pub fn init_params(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Vec<DenseLayer>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with_rng(dims, activations, &mut rng)
}

pub fn init_params_with_rng<R: Rng + ?Sized>(
    dims: &[usize],
    activations: &[Activation],
    rng: &mut R,
) -> Result<Vec<DenseLayer>> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least an input and an output dimension, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer dimensions must be positive, got {dims:?}"
        )));
    }
    if activations.len() != dims.len() - 1 {
        return Err(Error::InvalidConfig(format!(
            "{} activations given for {} layers",
            activations.len(),
            dims.len() - 1
        )));
    }
    Ok(dims
        .windows(2)
        .zip(activations)
        .map(|(w, &act)| DenseLayer::init(w[0], w[1], act, rng))
        .collect())
}

/// Per-layer values recorded by [`forward`] for use in [`backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.layers.last().expect("trace of a non-empty network").post
    }
}

pub fn forward(layers: &[DenseLayer], input: &[f64]) -> Result<Trace> {
    let first = layers
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty network".into()))?;
    check_len("network input", input.len(), first.in_dim)?;
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let x = match traces.last() {
            Some(prev) => prev.post.clone(),
            None => input.to_vec(),
        };
        if x.len() != layer.in_dim {
            return Err(Error::Shape(format!(
                "layer {i} expects {} inputs, previous layer produced {}",
                layer.in_dim,
                x.len()
            )));
        }
        let mut pre = vec![0.0; layer.out_dim];
        let mut post = vec![0.0; layer.out_dim];
        layer.eval_into(&x, &mut pre, &mut post);
        traces.push(LayerTrace {
            input: x,
            pre,
            post,
        });
    }
    Ok(Trace { layers: traces })
}

/// Gradient of a loss with respect to one layer's weights and biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            biases: vec![0.0; layer.biases.len()],
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            *v *= factor;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|&v| v == 0.0)
    }
}

/// Gradients for a whole parameter set. `None` marks a layer the loss does not
/// touch at all; optimizers leave such layers (and their moments) alone.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Option<LayerGrad>>,
}

impl GradientSet {
    pub fn zeros_like(layers: &[DenseLayer]) -> Self {
        Self {
            layers: layers.iter().map(|l| Some(LayerGrad::zeros_like(l))).collect(),
        }
    }

    pub fn full(grads: Vec<LayerGrad>) -> Self {
        Self {
            layers: grads.into_iter().map(Some).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.layers.iter_mut().flatten() {
            g.scale(factor);
        }
    }

    /// Flattens in the same order as [`flatten_params`]; absent layers are
    /// written as zeros.
    pub fn flatten(&self, layers: &[DenseLayer]) -> Vec<f64> {
        let mut out = Vec::with_capacity(layers.iter().map(DenseLayer::param_count).sum());
        for (layer, grad) in layers.iter().zip(&self.layers) {
            match grad {
                Some(g) => {
                    out.extend_from_slice(&g.weights);
                    out.extend_from_slice(&g.biases);
                }
                None => out.extend(std::iter::repeat_n(0.0, layer.param_count())),
            }
        }
        out
    }
}

/// Reverse pass through `layers` given the loss gradient at the network
/// output. Returns per-layer gradients and the gradient at the input.
pub fn backward(
    layers: &[DenseLayer],
    trace: &Trace,
    output_grad: &[f64],
) -> Result<(Vec<LayerGrad>, Vec<f64>)> {
    let mut grads: Vec<LayerGrad> = layers.iter().map(LayerGrad::zeros_like).collect();
    let input_grad = backward_accumulate(layers, trace, output_grad, &mut grads)?;
    Ok((grads, input_grad))
}

/// Like [`backward`] but adds into existing gradient buffers.
pub fn backward_accumulate(
    layers: &[DenseLayer],
    trace: &Trace,
    output_grad: &[f64],
    grads: &mut [LayerGrad],
) -> Result<Vec<f64>> {
    if trace.layers.len() != layers.len() || grads.len() != layers.len() {
        return Err(Error::Shape(format!(
            "network has {} layers, trace {} and gradient buffer {}",
            layers.len(),
            trace.layers.len(),
            grads.len()
        )));
    }
    let last = layers.last().ok_or_else(|| Error::InvalidConfig("empty network".into()))?;
    check_len("output gradient", output_grad.len(), last.out_dim)?;

    let mut upstream = output_grad.to_vec();
    for ((layer, lt), grad) in layers.iter().zip(&trace.layers).zip(grads.iter_mut()).rev() {
        if lt.pre.len() != layer.out_dim || lt.input.len() != layer.in_dim {
            return Err(Error::Shape("trace does not match layer shapes".into()));
        }
        let delta: Vec<f64> = upstream
            .iter()
            .zip(lt.pre.iter().zip(&lt.post))
            .map(|(g, (&z, &a))| g * layer.activation.derivative(z, a))
            .collect();
        let mut downstream = vec![0.0; layer.in_dim];
        for (row, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.biases[row] += d;
            let off = row * layer.in_dim;
            let gw = &mut grad.weights[off..off + layer.in_dim];
            let w = &layer.weights[off..off + layer.in_dim];
            for col in 0..layer.in_dim {
                gw[col] += d * lt.input[col];
                downstream[col] += d * w[col];
            }
        }
        upstream = downstream;
    }
    Ok(upstream)
}

/// Number of leading layers (from the input side) excluded from updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub frozen_layer_count: usize,
}

impl FreezeMask {
    pub const NONE: FreezeMask = FreezeMask {
        frozen_layer_count: 0,
    };

    pub fn first(n: usize) -> Self {
        Self {
            frozen_layer_count: n,
        }
    }

    #[inline]
    pub fn covers(&self, layer_index: usize) -> bool {
        layer_index < self.frozen_layer_count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }
}

/// Adam moments for a parameter set, shaped exactly like the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<LayerGrad>,
    second_moment: Vec<LayerGrad>,
}

impl OptimizerState {
    pub fn new(layers: &[DenseLayer], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: layers.iter().map(LayerGrad::zeros_like).collect(),
            second_moment: layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    /// One Adam step over every layer that has a gradient and is not frozen.
    /// Frozen or gradient-less layers are untouched, as are their moments.
    pub fn apply_update(
        &mut self,
        layers: &mut [DenseLayer],
        grads: &GradientSet,
        freeze: FreezeMask,
    ) -> Result<()> {
        if layers.len() != grads.layers.len() || layers.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "{} layers, {} gradients, {} optimizer slots",
                layers.len(),
                grads.layers.len(),
                self.first_moment.len()
            )));
        }
        for (layer, grad) in layers.iter().zip(&grads.layers) {
            if let Some(g) = grad {
                if g.weights.len() != layer.weights.len() || g.biases.len() != layer.biases.len() {
                    return Err(Error::Shape("gradient shape differs from layer".into()));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for (i, layer) in layers.iter_mut().enumerate() {
            if freeze.covers(i) {
                continue;
            }
            let Some(g) = &grads.layers[i] else { continue };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let step = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for k in 0..p.len() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                    let m_hat = m[k] / c1;
                    let v_hat = v[k] / c2;
                    p[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            };
            step(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            step(&mut layer.biases, &g.biases, &mut m.biases, &mut v.biases);
            if !layer.is_finite() {
                return Err(Error::NumericInstability(format!(
                    "layer {i} became non-finite after optimizer step {}",
                    self.step
                )));
            }
        }
        Ok(())
    }
}

pub fn flatten_params(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(DenseLayer::param_count).sum());
    for layer in layers {
        out.extend_from_slice(&layer.weights);
        out.extend_from_slice(&layer.biases);
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn load_flat_params(layers: &mut [DenseLayer], flat: &[f64]) -> Result<()> {
    let total: usize = layers.iter().map(DenseLayer::param_count).sum();
    check_len("flat parameter vector", flat.len(), total)?;
    let mut offset = 0;
    for layer in layers {
        let nw = layer.weights.len();
        layer.weights.copy_from_slice(&flat[offset..offset + nw]);
        offset += nw;
        let nb = layer.biases.len();
        layer.biases.copy_from_slice(&flat[offset..offset + nb]);
        offset += nb;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Index (in flattened order) of the worst parameter.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub parameters_checked: usize,
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// The per-parameter error is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn finite_difference_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_len("analytic gradient", analytic.len(), params.len())?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!("finite-difference step {step} must be positive")));
    }
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
        parameters_checked: params.len(),
    };
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss(&probe)?;
        probe[i] = orig - step;
        let down = loss(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericInstability(format!(
                "loss is not finite when perturbing parameter {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
