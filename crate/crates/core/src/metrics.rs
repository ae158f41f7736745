//! Frame-wise accuracy, segmental edit score and segmental overlap F1@k.
//!
//! Segmental metrics work on run-length segments. Background segments are
//! left out of the segmental metrics by default but background frames still
//! count toward frame accuracy.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: prediction has {pred} frames, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("corpus mismatch: {pred} predicted sequences vs {gt} ground-truth sequences")]
    CorpusMismatch { pred: usize, gt: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("threshold {0} outside (0, 100)")]
    Threshold(f64),
    #[error("no frames to score")]
    NoFrames,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Maximal run of one class: frames `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Percentage of frames where `pred` equals `gt`.
pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(MetricsError::NoFrames);
    }
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * correct as f64 / gt.len() as f64)
}

/// Run-length encodes `labels`; runs of `background` are dropped when given.
pub fn segments_from_labels(labels: &[usize], background: Option<usize>) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            if Some(labels[start]) != background {
                segments.push(Segment {
                    label: labels[start],
                    start,
                    end: t,
                });
            }
            start = t;
        }
    }
    segments
}

/// Unit-cost Levenshtein distance, two-row dynamic programming.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 (1 - lev / max(|pred|, |gt|))` over segment class strings.
pub fn edit_score(pred: &[Segment], gt: &[Segment]) -> f64 {
    let longest = pred.len().max(gt.len());
    if longest == 0 {
        return 100.0;
    }
    let p: Vec<usize> = pred.iter().map(|s| s.label).collect();
    let g: Vec<usize> = gt.iter().map(|s| s.label).collect();
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / longest as f64)
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    inter as f64 / union as f64
}

/// Segmental F1 at IoU threshold `k` percent.
///
/// Predictions are visited in order; each one claims the unmatched
/// same-class ground-truth segment with the highest IoU, and counts as a true
/// positive when that IoU is strictly above `k / 100`.
pub fn overlap_f1(pred: &[Segment], gt: &[Segment], k: f64) -> Result<f64> {
    if !(k > 0.0 && k < 100.0) {
        return Err(MetricsError::Threshold(k));
    }
    if pred.is_empty() && gt.is_empty() {
        return Ok(100.0);
    }
    let threshold = k / 100.0;
    let mut used = vec![false; gt.len()];
    let mut tp = 0usize;
    for p in pred {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, g)| !used[*j] && g.label == p.label)
            .map(|(j, g)| (j, iou(p, g)))
            .fold(None, |best: Option<(usize, f64)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((j, score)) = best {
            if score > threshold {
                used[j] = true;
                tp += 1;
            }
        }
    }
    let fp = pred.len() - tp;
    let fn_ = gt.len() - tp;
    let precision = if pred.is_empty() {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if gt.is_empty() {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Overlap thresholds in percent.
    pub thresholds: Vec<f64>,
    pub background: Option<usize>,
    /// Drop background runs before edit/F1 scoring.
    pub exclude_background_segments: bool,
    /// Count ground-truth background frames in frame accuracy.
    pub background_in_accuracy: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            thresholds: vec![10.0, 25.0, 50.0],
            background: None,
            exclude_background_segments: true,
            background_in_accuracy: true,
        }
    }
}

impl EvalOptions {
    pub fn with_background(background: Option<usize>) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMetrics {
    pub frames: usize,
    pub accuracy: f64,
    pub edit: f64,
    pub f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Frame accuracy pooled over every frame of every sequence.
    pub accuracy: f64,
    /// Edit score averaged over sequences.
    pub edit: f64,
    pub thresholds: Vec<f64>,
    /// F1 per threshold, averaged over sequences.
    pub f1: Vec<f64>,
    pub per_sequence: Vec<SequenceMetrics>,
}

/// Threshold label such as `f1@10` or `f1@12.5`.
pub fn f1_key(k: f64) -> String {
    format!("f1@{k}")
}

impl MetricsReport {
    /// `metric=value` lines, one per aggregate metric.
    pub fn to_kv(&self) -> String {
        let mut out = format!("acc={}\nedit={}\n", self.accuracy, self.edit);
        for (k, v) in self.thresholds.iter().zip(&self.f1) {
            let _ = writeln!(out, "{}={v}", f1_key(*k));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut header = format!("{:>8} {:>8}", "Acc.", "Edit");
        let mut values = format!("{:>8.2} {:>8.2}", self.accuracy, self.edit);
        for (k, v) in self.thresholds.iter().zip(&self.f1) {
            let _ = write!(header, " {:>8}", format!("F1@{k}"));
            let _ = write!(values, " {v:>8.2}");
        }
        format!("{header}\n{values}\n")
    }
}

fn sequence_metrics(pred: &[usize], gt: &[usize], opts: &EvalOptions) -> Result<(SequenceMetrics, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let scored: Vec<(usize, usize)> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| opts.background_in_accuracy || Some(**g) != opts.background)
        .map(|(p, g)| (*p, *g))
        .collect();
    let correct = scored.iter().filter(|(p, g)| p == g).count();
    let bg = if opts.exclude_background_segments {
        opts.background
    } else {
        None
    };
    let ps = segments_from_labels(pred, bg);
    let gs = segments_from_labels(gt, bg);
    let f1 = opts
        .thresholds
        .iter()
        .map(|&k| overlap_f1(&ps, &gs, k))
        .collect::<Result<Vec<_>>>()?;
    let accuracy = if scored.is_empty() {
        100.0
    } else {
        100.0 * correct as f64 / scored.len() as f64
    };
    Ok((
        SequenceMetrics {
            frames: gt.len(),
            accuracy,
            edit: edit_score(&ps, &gs),
            f1,
        },
        correct,
        scored.len(),
    ))
}

/// Scores a corpus: pooled frame accuracy, per-sequence-averaged segmental
/// scores.
pub fn evaluate(preds: &[Vec<usize>], gts: &[Vec<usize>], opts: &EvalOptions) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(MetricsError::CorpusMismatch {
            pred: preds.len(),
            gt: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    for &k in &opts.thresholds {
        if !(k > 0.0 && k < 100.0) {
            return Err(MetricsError::Threshold(k));
        }
    }
    let mut per_sequence = Vec::with_capacity(preds.len());
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        let (m, c, n) = sequence_metrics(p, g, opts)?;
        correct += c;
        total += n;
        per_sequence.push(m);
    }
    if total == 0 {
        return Err(MetricsError::NoFrames);
    }
    let n = per_sequence.len() as f64;
    let edit = per_sequence.iter().map(|m| m.edit).sum::<f64>() / n;
    let f1 = (0..opts.thresholds.len())
        .map(|i| per_sequence.iter().map(|m| m.f1[i]).sum::<f64>() / n)
        .collect();
    Ok(MetricsReport {
        accuracy: 100.0 * correct as f64 / total as f64,
        edit,
        thresholds: opts.thresholds.clone(),
        f1,
        per_sequence,
    })
}
