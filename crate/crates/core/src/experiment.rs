//! Long-range dependency experiment: on synthetic videos whose last action
//! can only be told apart from its twin by looking back at the first action,
//! compare the full model with the convolution-only ablation and with a
//! per-frame softmax classifier.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::data::{ambiguous_fraction, frame_local_ceiling, synth_generate, SequenceSample, SynthConfig};
use crate::layers::{time_softmax_dense, DenseParams};
use crate::model::{Model, ModelConfig, Variant};
use crate::tensor::Tensor;
use crate::train::{
    adam_step, argmax_rows, cross_entropy_loss, predict, train, AdamConfig, AdamState, Result, TrainOptions,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    /// Architecture shared by both variants; `variant`, `seed` and the
    /// data-dependent dimensions are overwritten per run.
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub frame_local_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig {
            num_classes: 6,
            actions_per_video: 5,
            sub_actions: (2, 2),
            frames_per_sub_action: (12, 16),
            feature_dim: 8,
            noise: 0.2,
            ambiguous_pairs: vec![(4, 5)],
            dependency: vec![(0, 4), (1, 5)],
            cue_decoys: true,
            train_videos: 30,
            test_videos: 20,
            seed: 0,
        };
        let mut model = ModelConfig::new(synth.feature_dim, synth.num_classes);
        model.conv_len = 3;
        model.hidden = 16;
        model.dropout_conv = 0.1;
        model.dropout_lstm = 0.1;
        Self {
            synth,
            model,
            epochs: 40,
            lr: 3e-3,
            seeds: vec![1, 2, 3, 4, 5],
            frame_local_epochs: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    /// Frame accuracy over all test frames (percent).
    pub overall: f64,
    /// Frame accuracy over test frames labelled with an ambiguous class.
    pub ambiguous: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// Fraction of test frames in ambiguous segments.
    pub p: f64,
    pub ceiling: f64,
    pub full: Score,
    pub conv_only: Score,
    pub frame_local: Score,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub results: Vec<SeedResult>,
}

/// Upper bound on how far (in frames) information travels through the
/// convolution, pooling and upsampling stages of the conv-only variant,
/// ignoring the sequence-wide maximum inside norm-ReLU.
pub fn local_receptive_radius(cfg: &ModelConfig) -> usize {
    let half = cfg.conv_len.div_ceil(2);
    let enc: usize = (0..cfg.layers).map(|i| (half + 1) << i).sum();
    let dec: usize = (0..cfg.layers).map(|i| (half + 2) << i).sum();
    enc + dec
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl ExperimentReport {
    fn med(&self, f: impl Fn(&SeedResult) -> f64) -> f64 {
        median(&self.results.iter().map(f).collect::<Vec<_>>())
    }

    pub fn median_full(&self) -> Score {
        Score {
            overall: self.med(|r| r.full.overall),
            ambiguous: self.med(|r| r.full.ambiguous),
        }
    }

    pub fn median_conv_only(&self) -> Score {
        Score {
            overall: self.med(|r| r.conv_only.overall),
            ambiguous: self.med(|r| r.conv_only.ambiguous),
        }
    }

    pub fn median_frame_local(&self) -> Score {
        Score {
            overall: self.med(|r| r.frame_local.overall),
            ambiguous: self.med(|r| r.frame_local.ambiguous),
        }
    }

    pub fn median_ceiling(&self) -> f64 {
        self.med(|r| r.ceiling)
    }

    /// Median ambiguous-frame accuracy of the full model minus that of the
    /// convolution-only model.
    pub fn ambiguous_gap(&self) -> f64 {
        self.median_full().ambiguous - self.median_conv_only().ambiguous
    }

    /// Full beats the ablation by at least 10 points on ambiguous frames and
    /// beats the frame-local ceiling overall (medians over seeds).
    pub fn passed(&self) -> bool {
        self.ambiguous_gap() >= 10.0 && self.median_full().overall > self.median_ceiling()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>7} {:>8} | {:>9} {:>9} | {:>9} {:>9} | {:>9} {:>9}\n",
            "seed", "p", "ceiling", "full", "full_amb", "conv", "conv_amb", "local", "local_amb"
        );
        let mut row = |label: String, p: f64, ceiling: f64, s: [Score; 3]| {
            let _ = writeln!(
                out,
                "{label:>6} {p:>7.3} {ceiling:>8.2} | {:>9.2} {:>9.2} | {:>9.2} {:>9.2} | {:>9.2} {:>9.2}",
                s[0].overall, s[0].ambiguous, s[1].overall, s[1].ambiguous, s[2].overall, s[2].ambiguous
            );
        };
        for r in &self.results {
            row(r.seed.to_string(), r.p, r.ceiling, [r.full, r.conv_only, r.frame_local]);
        }
        row(
            "median".into(),
            self.med(|r| r.p),
            self.median_ceiling(),
            [self.median_full(), self.median_conv_only(), self.median_frame_local()],
        );
        let _ = writeln!(
            out,
            "ambiguous-frame gap (full - conv-only): {:.2} points (need >= 10)",
            self.ambiguous_gap()
        );
        let _ = writeln!(
            out,
            "full overall {:.2} vs frame-local ceiling {:.2}",
            self.median_full().overall,
            self.median_ceiling()
        );
        let _ = writeln!(out, "{}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

fn score(preds: &[Vec<usize>], samples: &[&SequenceSample], pairs: &[(usize, usize)]) -> Score {
    let ambiguous = |l: usize| pairs.iter().any(|&(a, b)| l == a || l == b);
    let (mut hit, mut total, mut amb_hit, mut amb_total) = (0, 0, 0, 0);
    for (p, s) in preds.iter().zip(samples) {
        for (&y, &g) in p.iter().zip(&s.labels) {
            total += 1;
            hit += usize::from(y == g);
            if ambiguous(g) {
                amb_total += 1;
                amb_hit += usize::from(y == g);
            }
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    Score {
        overall: pct(hit, total),
        ambiguous: pct(amb_hit, amb_total),
    }
}

/// Softmax regression on single frames, trained with Adam (one update per
/// video). Returns test predictions.
fn frame_local_predictions(
    train_set: &[&SequenceSample],
    test_set: &[&SequenceSample],
    classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<Vec<Vec<usize>>> {
    let dim = train_set[0].features.cols();
    let mut params = [Tensor::zeros(&[classes, dim]), Tensor::zeros(&[classes])];
    let mut adam = AdamState::new(
        AdamConfig {
            lr,
            ..Default::default()
        },
        params.iter(),
    );
    for _ in 0..epochs {
        for s in train_set {
            let mut tape = Tape::new();
            let p = DenseParams {
                w: tape.leaf(params[0].clone()),
                b: tape.leaf(params[1].clone()),
            };
            let x = tape.leaf(s.features.clone());
            let y = time_softmax_dense(&mut tape, x, &p)?;
            let loss = cross_entropy_loss(&mut tape, y, &s.labels, None)?;
            let mut g = tape.backward(loss)?;
            let grads = [g.take(p.w), g.take(p.b)];
            adam_step(params.iter_mut(), &grads, &mut adam)?;
        }
    }
    test_set
        .iter()
        .map(|s| {
            let logits = s.features.matmul_nt(&params[0])?.add(&params[1])?;
            Ok(argmax_rows(&logits))
        })
        .collect()
}

/// Runs one seed: generate data, train both variants and the frame-local
/// baseline, score the test split.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let synth = SynthConfig {
        seed,
        ..cfg.synth.clone()
    };
    let ds = synth_generate(&synth)?.dataset;
    let train_set = ds.split("train")?;
    let test_set = ds.split("test")?;
    let p = ambiguous_fraction(test_set.iter().copied(), &synth.ambiguous_pairs);

    let run_variant = |variant: Variant| -> Result<Score> {
        let mut mc = cfg.model.clone();
        mc.variant = variant;
        mc.seed = seed;
        mc.input_dim = synth.feature_dim;
        mc.num_classes = synth.num_classes;
        let mut model = Model::build(mc)?;
        let opts = TrainOptions {
            epochs: cfg.epochs,
            adam: AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            seed,
            ..Default::default()
        };
        train(&mut model, &train_set, &[], &opts)?;
        let preds = test_set
            .iter()
            .map(|s| predict(&model, &s.features))
            .collect::<Result<Vec<_>>>()?;
        Ok(score(&preds, &test_set, &synth.ambiguous_pairs))
    };
    let full = run_variant(Variant::Full)?;
    let conv_only = run_variant(Variant::ConvOnly)?;
    let local = frame_local_predictions(&train_set, &test_set, synth.num_classes, cfg.frame_local_epochs, 1e-2)?;
    Ok(SeedResult {
        seed,
        p,
        ceiling: frame_local_ceiling(p),
        full,
        conv_only,
        frame_local: score(&local, &test_set, &synth.ambiguous_pairs),
    })
}

/// Runs every seed in `cfg.seeds`; `progress` sees each finished seed.
pub fn run_dependency_experiment(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&SeedResult),
) -> Result<ExperimentReport> {
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let r = run_seed(cfg, seed)?;
        progress(&r);
        results.push(r);
    }
    Ok(ExperimentReport { results })
}
