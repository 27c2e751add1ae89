//! Finite-difference checks of both pair losses on small seeded networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{finite_difference_check, flatten_params, load_flat_params, GradCheckReport};
use crate::siamese::{
    bce_batch_grad, bce_loss, distance_loss, distance_loss_grad, Architecture, Pair, PairBatch,
    SiameseParams,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Deliberate corruption of one analytic gradient entry, for checking that
/// the harness notices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientFault {
    /// Flat parameter index; the entry with the largest analytic magnitude
    /// when unset.
    pub parameter: Option<usize>,
    pub relative_perturbation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub bce: GradCheckReport,
    pub distance: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.bce.max_relative_error < self.tolerance && self.distance.max_relative_error < self.tolerance
    }

    pub fn render(&self) -> String {
        let line = |name: &str, r: &GradCheckReport| {
            format!(
                "{name:<9} params={:<4} max_rel_err={:.3e} worst_param={} analytic={:.6e} numeric={:.6e} {}\n",
                r.parameters_checked,
                r.max_relative_error,
                r.worst_index,
                r.analytic_at_worst,
                r.numeric_at_worst,
                if r.max_relative_error < self.tolerance { "ok" } else { "FAIL" }
            )
        };
        let mut out = line("bce", &self.bce);
        out.push_str(&line("distance", &self.distance));
        out
    }
}

/// Random inputs and a balanced pair batch over them.
pub fn random_problem(input_dim: usize, samples: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, PairBatch) {
    let inputs: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    // Samples alternate between two classes.
    let mut pairs = Vec::new();
    for a in 0..samples {
        for b in (a + 1)..samples {
            pairs.push(Pair {
                a,
                b,
                same_class: a % 2 == b % 2,
            });
        }
    }
    (inputs, PairBatch::new(pairs))
}

fn with_fault(mut analytic: Vec<f64>, fault: Option<GradientFault>) -> Vec<f64> {
    if let Some(f) = fault {
        let index = f.parameter.unwrap_or_else(|| {
            (0..analytic.len())
                .max_by(|&i, &j| analytic[i].abs().total_cmp(&analytic[j].abs()))
                .unwrap_or(0)
        });
        if let Some(g) = analytic.get_mut(index) {
            *g *= 1.0 + f.relative_perturbation;
        }
    }
    analytic
}

pub fn check_bce(
    params: &SiameseParams,
    inputs: &[Vec<f64>],
    batch: &PairBatch,
    step: f64,
    fault: Option<GradientFault>,
) -> Result<GradCheckReport> {
    let (_, grads) = bce_batch_grad(params, inputs, batch)?;
    let analytic = with_fault(grads.flatten(params.layers()), fault);
    let mut scratch = params.clone();
    finite_difference_check(
        |flat| {
            load_flat_params(scratch.layers_mut(), flat)?;
            let mut total = 0.0;
            for p in &batch.pairs {
                total += bce_loss(scratch.similarity(&inputs[p.a], &inputs[p.b])?, p.same_class);
            }
            Ok(total / batch.len() as f64)
        },
        &flatten_params(params.layers()),
        &analytic,
        step,
    )
}

pub fn check_distance(
    params: &SiameseParams,
    inputs: &[Vec<f64>],
    batch: &PairBatch,
    step: f64,
    fault: Option<GradientFault>,
) -> Result<GradCheckReport> {
    let (_, grads) = distance_loss_grad(params, inputs, batch)?;
    let analytic = with_fault(grads.flatten(params.layers()), fault);
    let mut scratch = params.clone();
    finite_difference_check(
        |flat| {
            load_flat_params(scratch.layers_mut(), flat)?;
            let emb = inputs
                .iter()
                .map(|x| scratch.extract(x))
                .collect::<Result<Vec<_>>>()?;
            distance_loss(&emb, batch)
        },
        &flatten_params(params.layers()),
        &analytic,
        step,
    )
}

/// Draws networks with the small architecture (random biases) until one yields a usable
/// distance-loss denominator, then checks both losses.
pub fn run_suite(seed: u64, step: f64, tolerance: f64, fault: Option<GradientFault>) -> Result<SuiteReport> {
    let arch = Architecture::small();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let mut params = SiameseParams::init_with_rng(&arch, &mut rng)?;
        // Biases start at zero, which puts ReLU units of a collapsed
        // embedding exactly on the kink where finite differences are invalid.
        for layer in params.layers_mut() {
            layer.biases_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let (inputs, batch) = random_problem(arch.input_dim, 6, &mut rng);
        match check_distance(&params, &inputs, &batch, step, fault) {
            Ok(distance) => {
                let bce = check_bce(&params, &inputs, &batch, step, fault)?;
                return Ok(SuiteReport {
                    bce,
                    distance,
                    tolerance,
                });
            }
            Err(Error::DegenerateDenominator { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NumericInstability(
        "no seeded network produced a usable distance-loss denominator".into(),
    ))
}
