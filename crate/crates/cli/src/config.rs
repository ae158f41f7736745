//! Run configuration: `[data]`, `[model]`, `[train]` and `[eval]` sections of
//! `key = value` lines. Every key is validated when parsed; unknown sections
//! and keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use tricornet::metrics::EvalOptions;
use tricornet::model::{ModelConfig, Variant};
use tricornet::train::{AdamConfig, TrainOptions};

const KEYS: &[(&str, &[&str])] = &[
    ("data", &["manifest", "train_split", "val_split"]),
    (
        "model",
        &[
            "variant",
            "layers",
            "conv_len",
            "hidden",
            "dropout_conv",
            "dropout_lstm",
        ],
    ),
    (
        "train",
        &["epochs", "lr", "seed", "divergence_limit", "stop_at_accuracy"],
    ),
    (
        "eval",
        &["split", "thresholds", "background", "exclude_background_segments"],
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    /// Whatever the manifest declares.
    Manifest,
    None,
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub train_split: String,
    pub val_split: Option<String>,
    pub variant: Variant,
    pub layers: usize,
    pub conv_len: usize,
    pub hidden: usize,
    pub dropout_conv: f64,
    pub dropout_lstm: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub divergence_limit: f64,
    pub stop_at_accuracy: Option<f64>,
    pub eval_split: String,
    pub thresholds: Vec<f64>,
    pub background: Background,
    pub exclude_background_segments: bool,
}

struct Entry {
    value: String,
    /// Directory that relative paths in `value` are resolved against.
    base: PathBuf,
}

fn known(section: &str, key: &str) -> bool {
    KEYS.iter().any(|(s, keys)| *s == section && keys.contains(&key))
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("config key '{key}': cannot parse '{value}': {e}"))
}

impl RunConfig {
    /// Reads `path`, then applies `section.key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base, overrides).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut entries: BTreeMap<(String, String), Entry> = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    bail!("line {}: unknown section [{name}]", idx + 1);
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", idx + 1))?;
            let key = key.trim();
            let Some(sec) = &section else {
                bail!("line {}: key '{key}' appears before any section", idx + 1);
            };
            if !known(sec, key) {
                bail!("line {}: unknown config key '{sec}.{key}'", idx + 1);
            }
            entries.insert(
                (sec.clone(), key.to_string()),
                Entry {
                    value: value.trim().to_string(),
                    base: base.to_path_buf(),
                },
            );
        }
        for o in overrides {
            let (name, value) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override '{o}' is not section.key=value"))?;
            let (sec, key) = name
                .trim()
                .split_once('.')
                .ok_or_else(|| anyhow!("override '{o}' is not section.key=value"))?;
            if !known(sec, key) {
                bail!("unknown config key '{sec}.{key}' in override");
            }
            entries.insert(
                (sec.to_string(), key.to_string()),
                Entry {
                    value: value.trim().to_string(),
                    base: PathBuf::from("."),
                },
            );
        }
        Self::from_entries(&entries)
    }

    fn from_entries(entries: &BTreeMap<(String, String), Entry>) -> Result<Self> {
        let get = |sec: &str, key: &str| entries.get(&(sec.to_string(), key.to_string()));
        let value = |sec: &str, key: &str| get(sec, key).map(|e| e.value.as_str());
        fn or<T: std::str::FromStr>(v: Option<&str>, key: &str, default: T) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.map_or(Ok(default), |v| parse_value(key, v))
        }

        let manifest = get("data", "manifest")
            .filter(|e| !e.value.is_empty())
            .map(|e| e.base.join(&e.value))
            .ok_or_else(|| anyhow!("config key 'data.manifest' is required"))?;
        let defaults = ModelConfig::new(1, 2);
        let train_defaults = TrainOptions::default();
        let cfg = Self {
            manifest,
            train_split: value("data", "train_split").unwrap_or("train").to_string(),
            val_split: match value("data", "val_split") {
                None => Some("test".to_string()),
                Some("" | "none") => None,
                Some(v) => Some(v.to_string()),
            },
            variant: or(value("model", "variant"), "model.variant", Variant::Full)?,
            layers: or(value("model", "layers"), "model.layers", defaults.layers)?,
            conv_len: or(value("model", "conv_len"), "model.conv_len", defaults.conv_len)?,
            hidden: or(value("model", "hidden"), "model.hidden", defaults.hidden)?,
            dropout_conv: or(
                value("model", "dropout_conv"),
                "model.dropout_conv",
                defaults.dropout_conv,
            )?,
            dropout_lstm: or(
                value("model", "dropout_lstm"),
                "model.dropout_lstm",
                defaults.dropout_lstm,
            )?,
            epochs: or(value("train", "epochs"), "train.epochs", train_defaults.epochs)?,
            lr: or(value("train", "lr"), "train.lr", train_defaults.adam.lr)?,
            seed: or(value("train", "seed"), "train.seed", 0)?,
            divergence_limit: or(
                value("train", "divergence_limit"),
                "train.divergence_limit",
                train_defaults.divergence_limit,
            )?,
            stop_at_accuracy: match value("train", "stop_at_accuracy") {
                None | Some("" | "none") => None,
                Some(v) => Some(parse_value("train.stop_at_accuracy", v)?),
            },
            eval_split: value("eval", "split").unwrap_or("test").to_string(),
            thresholds: match value("eval", "thresholds") {
                None => EvalOptions::default().thresholds,
                Some(v) => v
                    .split(',')
                    .map(|t| parse_value("eval.thresholds", t.trim()))
                    .collect::<Result<_>>()?,
            },
            background: match value("eval", "background") {
                None | Some("manifest") => Background::Manifest,
                Some("none") => Background::None,
                Some(v) => Background::Class(parse_value("eval.background", v)?),
            },
            exclude_background_segments: or(
                value("eval", "exclude_background_segments"),
                "eval.exclude_background_segments",
                true,
            )?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.model_config(1, 2)
            .validate()
            .map_err(|e| anyhow!("[model] section: {e}"))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("config key 'train.lr': must be a positive number, got {}", self.lr);
        }
        if self.divergence_limit.is_nan() || self.divergence_limit <= 0.0 {
            bail!("config key 'train.divergence_limit': must be positive");
        }
        if let Some(a) = self.stop_at_accuracy {
            if !(0.0..=100.0).contains(&a) {
                bail!("config key 'train.stop_at_accuracy': must lie in [0, 100], got {a}");
            }
        }
        if self.thresholds.is_empty() {
            bail!("config key 'eval.thresholds': at least one threshold is required");
        }
        for &k in &self.thresholds {
            if !(k > 0.0 && k < 100.0) {
                bail!("config key 'eval.thresholds': {k} is outside (0, 100)");
            }
        }
        if self.train_split.is_empty() || self.eval_split.is_empty() {
            bail!("split names must not be empty");
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            conv_len: self.conv_len,
            hidden: self.hidden,
            num_classes,
            input_dim,
            variant: self.variant,
            dropout_conv: self.dropout_conv,
            dropout_lstm: self.dropout_lstm,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self, manifest_background: Option<usize>) -> EvalOptions {
        EvalOptions {
            thresholds: self.thresholds.clone(),
            background: match self.background {
                Background::Manifest => manifest_background,
                Background::None => None,
                Background::Class(c) => Some(c),
            },
            exclude_background_segments: self.exclude_background_segments,
            background_in_accuracy: true,
        }
    }

    pub fn train_options(&self, manifest_background: Option<usize>) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
            divergence_limit: self.divergence_limit,
            stop_at_accuracy: self.stop_at_accuracy,
            eval: self.eval_options(manifest_background),
        }
    }

    /// Every setting, defaults included, in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[data]");
        let _ = writeln!(out, "manifest = {}", self.manifest.display());
        let _ = writeln!(out, "train_split = {}", self.train_split);
        let _ = writeln!(out, "val_split = {}", self.val_split.as_deref().unwrap_or("none"));
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "variant = {}", self.variant);
        let _ = writeln!(out, "layers = {}", self.layers);
        let _ = writeln!(out, "conv_len = {}", self.conv_len);
        let _ = writeln!(out, "hidden = {}", self.hidden);
        let _ = writeln!(out, "dropout_conv = {}", self.dropout_conv);
        let _ = writeln!(out, "dropout_lstm = {}", self.dropout_lstm);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "divergence_limit = {}", self.divergence_limit);
        match self.stop_at_accuracy {
            Some(a) => writeln!(out, "stop_at_accuracy = {a}"),
            None => writeln!(out, "stop_at_accuracy = none"),
        }
        .unwrap();
        let _ = writeln!(out, "\n[eval]");
        let _ = writeln!(out, "split = {}", self.eval_split);
        let t: Vec<String> = self.thresholds.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(out, "thresholds = {}", t.join(","));
        let bg = match self.background {
            Background::Manifest => "manifest".to_string(),
            Background::None => "none".to_string(),
            Background::Class(c) => c.to_string(),
        };
        let _ = writeln!(out, "background = {bg}");
        let _ = writeln!(
            out,
            "exclude_background_segments = {}",
            self.exclude_background_segments
        );
        out
    }
}
