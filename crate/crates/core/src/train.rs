//! Cross-entropy loss, Adam, the per-sequence training loop and prediction.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::{DataError, SequenceSample};
use crate::metrics::{evaluate, f1_key, EvalOptions, MetricsError, MetricsReport};
use crate::model::{Model, ModelError};
use crate::tensor::{Tensor, TensorError};

/// Added inside the logarithm of the loss.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, sequence '{sequence}': {detail}")]
    Divergence {
        epoch: usize,
        sequence: String,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean negative log-likelihood of `labels` under the row distributions in
/// `yhat`, over frames where `mask` is set (all frames when `None`).
pub fn cross_entropy_loss(tape: &mut Tape, yhat: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<Var> {
    let y = tape.value(yhat);
    if y.rank() != 2 || y.rows() != labels.len() {
        return Err(TrainError::Contract(format!(
            "cross entropy: predictions {:?} for {} labels",
            y.shape(),
            labels.len()
        )));
    }
    let classes = y.cols();
    if let Some(m) = mask {
        if m.len() != labels.len() {
            return Err(TrainError::Contract(format!(
                "cross entropy: mask has {} flags for {} frames",
                m.len(),
                labels.len()
            )));
        }
    }
    if let Some((t, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(TrainError::Contract(format!(
            "cross entropy: label {l} at frame {t} is outside 0..{classes}"
        )));
    }
    let kept: Vec<usize> = (0..labels.len()).filter(|&t| mask.is_none_or(|m| m[t])).collect();
    if kept.is_empty() {
        return Err(TrainError::Contract("cross entropy: mask selects no frames".into()));
    }
    let n = kept.len() as f64;
    let loss = -kept.iter().map(|&t| (y.get2(t, labels[t]) + LOG_EPS).ln()).sum::<f64>() / n;
    let probs: Vec<f64> = kept.iter().map(|&t| y.get2(t, labels[t])).collect();
    let labels = labels.to_vec();
    let shape = y.shape().to_vec();
    Ok(tape.record(Tensor::scalar(loss), &[yhat], move |g| {
        let g = g.item();
        let mut dy = Tensor::zeros(&shape);
        let data = dy.data_mut();
        for (&t, &p) in kept.iter().zip(&probs) {
            data[t * classes + labels[t]] = -g / (n * (p + LOG_EPS));
        }
        vec![dy]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TrainError::Contract(format!(
                "adam: block {i} has parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powf(state.t as f64);
    let c2 = 1.0 - beta2.powf(state.t as f64);
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Row-wise argmax; ties go to the lowest class id.
pub fn argmax_rows(y: &Tensor) -> Vec<usize> {
    (0..y.rows())
        .map(|t| {
            let row = y.row(t);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Per-frame class ids from an inference-mode forward pass.
pub fn predict(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.predict_proba(x)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Seeds shuffling and dropout.
    pub seed: u64,
    /// Any parameter whose magnitude exceeds this counts as divergence.
    pub divergence_limit: f64,
    /// Stop once validation frame accuracy reaches this percentage.
    pub stop_at_accuracy: Option<f64>,
    pub eval: EvalOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            adam: AdamConfig::default(),
            seed: 0,
            divergence_limit: 1e5,
            stop_at_accuracy: None,
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sequence loss.
    pub loss: f64,
    /// Frame accuracy of the training-mode forward passes, pooled.
    pub train_accuracy: f64,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub initial_validation: Option<MetricsReport>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Metrics after the last epoch, or before training when no epoch ran.
    pub fn final_validation(&self) -> Option<&MetricsReport> {
        match self.epochs.last() {
            Some(e) => e.validation.as_ref(),
            None => self.initial_validation.as_ref(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let thresholds = self
            .final_validation()
            .map(|m| m.thresholds.clone())
            .unwrap_or_default();
        let _ = write!(
            out,
            "{:>6} {:>12} {:>10} {:>9} {:>9}",
            "epoch", "loss", "train_acc", "val_acc", "val_edit"
        );
        for k in &thresholds {
            let _ = write!(out, " {:>9}", format!("val_F1@{k}"));
        }
        out.push('\n');
        let mut row = |label: String, loss: Option<f64>, acc: Option<f64>, val: Option<&MetricsReport>| {
            let num = |v: Option<f64>, w: usize, p: usize| v.map_or(format!("{:>w$}", "-"), |v| format!("{v:>w$.p$}"));
            let _ = write!(
                out,
                "{label:>6} {} {} {} {}",
                num(loss, 12, 6),
                num(acc, 10, 2),
                num(val.map(|m| m.accuracy), 9, 2),
                num(val.map(|m| m.edit), 9, 2)
            );
            for i in 0..thresholds.len() {
                let _ = write!(out, " {}", num(val.and_then(|m| m.f1.get(i).copied()), 9, 2));
            }
            out.push('\n');
        };
        row("init".into(), None, None, self.initial_validation.as_ref());
        for e in &self.epochs {
            row(
                e.epoch.to_string(),
                Some(e.loss),
                Some(e.train_accuracy),
                e.validation.as_ref(),
            );
        }
        let _ = writeln!(out, "seed {}", self.seed);
        if self.stopped_early {
            out.push_str("stopped early: validation accuracy target reached\n");
        }
        let _ = writeln!(out, "wall time {:.3} s", self.wall_time_secs);
        out
    }

    /// Machine-readable form. Wall time is left out so that reruns compare
    /// byte for byte.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "seed={}\nepochs={}\nstopped_early={}\n",
            self.seed,
            self.epochs.len(),
            self.stopped_early
        );
        let metrics = |out: &mut String, prefix: &str, m: &MetricsReport| {
            let _ = writeln!(out, "{prefix}.acc={}", m.accuracy);
            let _ = writeln!(out, "{prefix}.edit={}", m.edit);
            for (k, v) in m.thresholds.iter().zip(&m.f1) {
                let _ = writeln!(out, "{prefix}.{}={v}", f1_key(*k));
            }
        };
        if let Some(m) = &self.initial_validation {
            metrics(&mut out, "init.val", m);
        }
        for e in &self.epochs {
            let _ = writeln!(out, "epoch{}.loss={}", e.epoch, e.loss);
            let _ = writeln!(out, "epoch{}.train_acc={}", e.epoch, e.train_accuracy);
            if let Some(m) = &e.validation {
                metrics(&mut out, &format!("epoch{}.val", e.epoch), m);
            }
        }
        if let Some(m) = self.final_validation() {
            out.push_str(&m.to_kv());
        }
        out
    }
}

/// Inference-mode metrics over `samples`; `None` for an empty set.
pub fn evaluate_samples(
    model: &Model,
    samples: &[&SequenceSample],
    opts: &EvalOptions,
) -> Result<Option<MetricsReport>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(predict(model, &s.features)?);
        gts.push(s.labels.clone());
    }
    Ok(Some(evaluate(&preds, &gts, opts)?))
}

fn check_samples(model: &Model, samples: &[&SequenceSample]) -> Result<()> {
    let cfg = model.config();
    for s in samples {
        if s.features.rank() != 2 || s.features.cols() != cfg.input_dim || s.features.rows() != s.labels.len() {
            return Err(TrainError::Contract(format!(
                "sample '{}': features {:?} with {} labels, model expects width {}",
                s.id,
                s.features.shape(),
                s.labels.len(),
                cfg.input_dim
            )));
        }
        if let Some(&l) = s.labels.iter().find(|&&l| l >= cfg.num_classes) {
            return Err(TrainError::Contract(format!(
                "sample '{}': label {l} outside 0..{}",
                s.id, cfg.num_classes
            )));
        }
    }
    Ok(())
}

/// One forward/backward pass on a single sequence. Returns the loss, the
/// number of correctly labelled frames, and per-parameter gradients.
pub fn loss_and_gradients(
    model: &Model,
    sample: &SequenceSample,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let y = model.forward_on_tape(&mut tape, &params, &sample.features, training, rng)?;
    let correct = argmax_rows(tape.value(y))
        .iter()
        .zip(&sample.labels)
        .filter(|(p, g)| p == g)
        .count();
    let loss = cross_entropy_loss(&mut tape, y, &sample.labels, None)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, correct, params.into_iter().map(|p| grads.take(p)).collect()))
}

/// Trains `model` in place. See [`train_with_progress`].
pub fn train(
    model: &mut Model,
    train_set: &[&SequenceSample],
    val_set: &[&SequenceSample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    train_with_progress(model, train_set, val_set, opts, |_| {})
}

/// Per epoch: shuffle the training sequences, take one Adam step per
/// sequence, then score `val_set` in inference mode. `progress` sees every
/// finished epoch.
pub fn train_with_progress(
    model: &mut Model,
    train_set: &[&SequenceSample],
    val_set: &[&SequenceSample],
    opts: &TrainOptions,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let started = Instant::now();
    if train_set.is_empty() && opts.epochs > 0 {
        return Err(TrainError::Contract("empty training set".into()));
    }
    check_samples(model, train_set)?;
    check_samples(model, val_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new(opts.adam, model.params().iter().map(|p| &p.value));
    let initial_validation = evaluate_samples(model, val_set, &opts.eval)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(opts.epochs);
    let mut stopped_early = false;
    let total_frames: usize = train_set.iter().map(|s| s.len()).sum();

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for &i in &order {
            let sample = train_set[i];
            let diverged = |detail: String| TrainError::Divergence {
                epoch,
                sequence: sample.id.clone(),
                detail,
            };
            let (loss, hits, grads) = loss_and_gradients(model, sample, true, &mut rng)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            if let Some((p, _)) = model.params().iter().zip(&grads).find(|(_, g)| !g.is_finite()) {
                return Err(diverged(format!("non-finite gradient for {}", p.name)));
            }
            adam_step(model.params_mut().iter_mut().map(|p| &mut p.value), &grads, &mut adam)?;
            if let Some(p) = model
                .params()
                .iter()
                .find(|p| !p.value.is_finite() || p.value.max_abs() > opts.divergence_limit)
            {
                return Err(diverged(format!(
                    "parameter {} reached magnitude {} (limit {})",
                    p.name,
                    p.value.max_abs(),
                    opts.divergence_limit
                )));
            }
            loss_sum += loss;
            correct += hits;
        }
        let validation = evaluate_samples(model, val_set, &opts.eval)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: 100.0 * correct as f64 / total_frames as f64,
            validation,
        };
        progress(&record);
        let reached = match (opts.stop_at_accuracy, &record.validation) {
            (Some(target), Some(v)) => v.accuracy >= target,
            _ => false,
        };
        epochs.push(record);
        if reached {
            stopped_early = epoch < opts.epochs;
            break;
        }
    }

    Ok(TrainReport {
        seed: opts.seed,
        initial_validation,
        epochs,
        stopped_early,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
