//! Finite-difference verification of the model's analytic gradients, one
//! parameter block at a time.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{relative_error, Tape};
use crate::model::{Model, ModelConfig, Variant};
use crate::tensor::Tensor;
use crate::train::{cross_entropy_loss, loss_and_gradients, Result, TrainError};

/// Relative disagreement between the `h` and `2h` central differences beyond
/// which the stencil is assumed to straddle a ReLU or max kink.
const KINK_RATIO: f64 = 1e-5;
/// Rounding error of a loss evaluation, relative to the loss.
const LOSS_ROUNDING: f64 = 1e-15;
const MIN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Initial step of the five-point central difference; shrunk when the
    /// stencil straddles a kink.
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates checked per block; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Seeds coordinate sampling and the dropout masks.
    pub seed: u64,
    /// Run with dropout active (masks are held fixed across evaluations).
    pub training: bool,
    /// Adds a constant to the analytic gradient of the named block. Used to
    /// confirm that the checker notices a broken backward rule.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tolerance: 1e-4,
            max_coords: Some(256),
            seed: 0,
            training: true,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub total: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    /// Analytic and numeric values at `worst_index`.
    pub worst_pair: (f64, f64),
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let width = self.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("variant {}  tolerance {:e}\n", self.variant, self.tolerance);
        let _ = writeln!(
            out,
            "{:<width$} {:>14} {:>13} {:>12} {:>13} {:>13}  result",
            "block", "shape", "checked", "max_rel_err", "analytic", "numeric"
        );
        for b in &self.blocks {
            let shape = b.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(
                out,
                "{:<width$} {:>14} {:>13} {:>12.3e} {:>13.5e} {:>13.5e}  {}",
                b.name,
                shape,
                format!("{}/{}", b.checked, b.total),
                b.max_rel_error,
                b.worst_pair.0,
                b.worst_pair.1,
                if b.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "{}: {} blocks, max relative error {:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.blocks.len(),
            self.max_rel_error()
        );
        out
    }
}

/// The small configuration used for gradient checks: d=3, c=2, K=2, L=3, H=4.
pub fn toy_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::new(3, 2);
    cfg.layers = 2;
    cfg.conv_len = 3;
    cfg.hidden = 4;
    cfg.variant = variant;
    cfg
}

/// Seeded Gaussian-ish features and random labels for `cfg`.
pub fn toy_input(cfg: &ModelConfig, steps: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..steps * cfg.input_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let labels = (0..steps).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    (Tensor::new(&[steps, cfg.input_dim], data).unwrap(), labels)
}

fn loss_at(model: &Model, x: &Tensor, labels: &[usize], training: bool, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = model.forward_on_tape(&mut tape, &params, x, training, &mut rng)?;
    let l = cross_entropy_loss(&mut tape, y, labels, None)?;
    Ok(tape.value(l).item())
}

/// Compares backprop against central differences of the cross-entropy loss
/// for every parameter block of `model`.
///
/// The numeric derivative uses the fourth-order stencil
/// `(8(f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`: many gradients of the full
/// model are around 1e-7, where the rounding error of a two-point difference
/// alone would exceed the tolerance. Piecewise-linear activations make the
/// loss non-smooth at isolated points, so a coordinate whose inner and outer
/// differences disagree is re-measured with a ten times smaller step.
pub fn gradcheck_model(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(TrainError::Contract(format!(
            "gradcheck step must be positive, got {}",
            opts.eps
        )));
    }
    if let Some(name) = &opts.inject_fault {
        if model.param(name).is_none() {
            return Err(TrainError::Contract(format!("no parameter block named '{name}'")));
        }
    }
    let dropout_seed = opts.seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (_, _, mut grads) = loss_and_gradients(
        model,
        &crate::data::SequenceSample {
            id: "gradcheck".into(),
            features: x.clone(),
            labels: labels.to_vec(),
        },
        opts.training,
        &mut rng,
    )?;
    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = model.clone();
    let base = loss_at(model, x, labels, opts.training, dropout_seed)?.abs().max(1.0);
    let mut blocks = Vec::with_capacity(grads.len());
    for (i, grad) in grads.iter_mut().enumerate() {
        let name = model.params()[i].name.clone();
        if opts.inject_fault.as_deref() == Some(name.as_str()) {
            *grad = grad.map(|g| g + 1e-2);
        }
        let total = grad.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(n) if n < total => {
                let mut c = sample(&mut pick, total, n).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..total).collect(),
        };
        let (mut worst, mut worst_index, mut worst_pair) = (0.0f64, 0, (0.0, 0.0));
        for &j in &coords {
            let orig = work.params()[i].value.data()[j];
            let mut at = |offset: f64| {
                work.params_mut()[i].value.data_mut()[j] = orig + offset;
                loss_at(&work, x, labels, opts.training, dropout_seed)
            };
            let mut h = opts.eps;
            let numeric = loop {
                let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                let (near, far) = ((p1 - m1) / (2.0 * h), (p2 - m2) / (4.0 * h));
                let estimate = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                // the two inner estimates agree unless a kink lies within 2h
                let slack = KINK_RATIO * near.abs().max(far.abs()) + LOSS_ROUNDING * base / h;
                if (near - far).abs() <= slack || h <= MIN_STEP {
                    break estimate;
                }
                h /= 10.0;
            };
            work.params_mut()[i].value.data_mut()[j] = orig;
            let err = relative_error(grad.data()[j], numeric);
            if err > worst || err.is_nan() {
                worst = if err.is_nan() { f64::INFINITY } else { err };
                worst_index = j;
                worst_pair = (grad.data()[j], numeric);
            }
        }
        blocks.push(BlockCheck {
            name,
            shape: grad.shape().to_vec(),
            checked: coords.len(),
            total,
            max_rel_error: worst,
            worst_index,
            worst_pair,
            passed: worst <= opts.tolerance,
        });
    }
    Ok(GradcheckReport {
        variant: model.config().variant,
        tolerance: opts.tolerance,
        blocks,
    })
}
