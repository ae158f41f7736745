//! Dataset files, the manifest that ties them together, the synthetic
//! long-range-dependency generator, and text timelines.
//!
//! File formats:
//!
//! * features (text): first line `T d`, then `T` lines of `d` space-separated
//!   reals written in shortest round-trip form;
//! * features (binary): `TRIC`, `u32` version, `u64` T, `u64` d, then `T*d`
//!   little-endian `f64` values;
//! * labels: `T` lines with one class id each;
//! * manifest: `key = value` header, a `[samples]` block of
//!   `id = features_path labels_path` lines and `[split NAME]` blocks listing
//!   sample ids. Paths are relative to the manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::metrics::segments_from_labels;
use crate::tensor::Tensor;

const BINARY_MAGIC: &[u8; 4] = b"TRIC";
const BINARY_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("config key '{key}': {msg}")]
    Config { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// One video: `T x d` features and `T` frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub id: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleFiles {
    pub id: String,
    pub features: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub background: Option<usize>,
    pub feature_dim: usize,
    /// Whether a sample may appear in more than one split.
    pub shared_splits: bool,
    pub samples: Vec<SampleFiles>,
    pub splits: Vec<Split>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, name: &str) -> Option<&Split> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# tricornet dataset manifest\n");
        let _ = writeln!(out, "classes = {}", self.class_names.join(","));
        if let Some(bg) = self.background {
            let _ = writeln!(out, "background = {bg}");
        }
        let _ = writeln!(out, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(out, "shared_splits = {}", self.shared_splits);
        out.push_str("\n[samples]\n");
        for s in &self.samples {
            let _ = writeln!(out, "{} = {} {}", s.id, s.features.display(), s.labels.display());
        }
        for split in &self.splits {
            let _ = writeln!(out, "\n[split {}]", split.name);
            for id in &split.ids {
                let _ = writeln!(out, "{id}");
            }
        }
        out
    }

    /// Parses manifest text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        enum Section {
            Header,
            Samples,
            Split(usize),
        }
        let mut section = Section::Header;
        let mut classes: Option<Vec<String>> = None;
        let mut background = None;
        let mut feature_dim = None;
        let mut shared_splits = false;
        let mut samples: Vec<SampleFiles> = Vec::new();
        let mut splits: Vec<Split> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(head) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let head = head.trim();
                section = if head == "samples" {
                    Section::Samples
                } else if let Some(name) = head.strip_prefix("split ") {
                    let name = name.trim().to_string();
                    if splits.iter().any(|s| s.name == name) {
                        return Err(parse_err(path, line_no, format!("duplicate split '{name}'")));
                    }
                    splits.push(Split { name, ids: Vec::new() });
                    Section::Split(splits.len() - 1)
                } else {
                    return Err(parse_err(path, line_no, format!("unknown section [{head}]")));
                };
                continue;
            }
            match section {
                Section::Header => {
                    let (key, value) = line
                        .split_once('=')
                        .map(|(k, v)| (k.trim(), v.trim()))
                        .ok_or_else(|| parse_err(path, line_no, "expected key = value"))?;
                    match key {
                        "classes" => classes = Some(value.split(',').map(|c| c.trim().to_string()).collect()),
                        "background" => {
                            background = Some(
                                value
                                    .parse::<usize>()
                                    .map_err(|_| parse_err(path, line_no, format!("bad background id '{value}'")))?,
                            )
                        }
                        "feature_dim" => {
                            feature_dim = Some(
                                value
                                    .parse::<usize>()
                                    .map_err(|_| parse_err(path, line_no, format!("bad feature_dim '{value}'")))?,
                            )
                        }
                        "shared_splits" => {
                            shared_splits = value
                                .parse::<bool>()
                                .map_err(|_| parse_err(path, line_no, format!("bad shared_splits '{value}'")))?
                        }
                        other => return Err(parse_err(path, line_no, format!("unknown key '{other}'"))),
                    }
                }
                Section::Samples => {
                    let (id, files) = line
                        .split_once('=')
                        .ok_or_else(|| parse_err(path, line_no, "expected id = features labels"))?;
                    let files: Vec<&str> = files.split_whitespace().collect();
                    let [features, labels] = files[..] else {
                        return Err(parse_err(path, line_no, "expected two file paths"));
                    };
                    let id = id.trim().to_string();
                    if samples.iter().any(|s| s.id == id) {
                        return Err(parse_err(path, line_no, format!("duplicate sample '{id}'")));
                    }
                    samples.push(SampleFiles {
                        id,
                        features: features.into(),
                        labels: labels.into(),
                    });
                }
                Section::Split(i) => splits[i].ids.push(line.to_string()),
            }
        }

        let class_names = classes.ok_or_else(|| parse_err(path, 0, "missing 'classes'"))?;
        if class_names.len() < 2 || class_names.iter().any(String::is_empty) {
            return Err(parse_err(path, 0, "need at least two non-empty class names"));
        }
        let feature_dim = feature_dim.ok_or_else(|| parse_err(path, 0, "missing 'feature_dim'"))?;
        if feature_dim == 0 {
            return Err(parse_err(path, 0, "feature_dim must be positive"));
        }
        if let Some(bg) = background {
            if bg >= class_names.len() {
                return Err(parse_err(path, 0, format!("background id {bg} is not a class")));
            }
        }
        let manifest = Self {
            class_names,
            background,
            feature_dim,
            shared_splits,
            samples,
            splits,
        };
        manifest.validate_splits(path)?;
        Ok(manifest)
    }

    fn validate_splits(&self, path: &Path) -> Result<()> {
        let known: BTreeSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for split in &self.splits {
            for id in &split.ids {
                if !known.contains(id.as_str()) {
                    return Err(parse_err(
                        path,
                        0,
                        format!("split '{}' references unknown sample '{id}'", split.name),
                    ));
                }
                if let Some(prev) = owner.insert(id, &split.name) {
                    if !self.shared_splits || prev == split.name {
                        return Err(parse_err(
                            path,
                            0,
                            format!(
                                "sample '{id}' appears in both '{prev}' and '{}' (set shared_splits = true to allow)",
                                split.name
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn sample(&self, id: &str) -> Option<&SequenceSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples of the named split, in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<&SequenceSample>> {
        let split = self
            .manifest
            .split(name)
            .ok_or_else(|| DataError::Invalid(format!("no split named '{name}'")))?;
        Ok(split
            .ids
            .iter()
            .map(|id| self.sample(id).expect("split ids validated on load"))
            .collect())
    }
}

/// Writes features as text.
pub fn features_to_text(features: &Tensor) -> String {
    let (rows, cols) = (features.rows(), features.cols());
    let mut out = format!("{rows} {cols}\n");
    for t in 0..rows {
        let row: Vec<String> = features.row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn features_to_binary(features: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * features.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a feature file in either format (binary is recognized by its magic).
pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(BINARY_MAGIC) {
        return parse_binary_features(&bytes, path);
    }
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, "not UTF-8 text"))?;
    parse_text_features(&text, path)
}

fn parse_binary_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let header = |at: usize, n: usize| {
        bytes
            .get(at..at + n)
            .ok_or_else(|| parse_err(path, 0, "truncated binary header"))
    };
    let version = u32::from_le_bytes(header(4, 4)?.try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(parse_err(path, 0, format!("unsupported binary version {version}")));
    }
    let rows = u64::from_le_bytes(header(8, 8)?.try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header(16, 8)?.try_into().unwrap()) as usize;
    let body = &bytes[24..];
    if rows == 0 || cols == 0 || body.len() != rows * cols * 8 {
        return Err(parse_err(
            path,
            0,
            format!("binary body holds {} bytes, header promises {rows}x{cols}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&[rows, cols], data).unwrap())
}

fn parse_text_features(text: &str, path: &Path) -> Result<Tensor> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| parse_err(path, 1, "empty feature file"))?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, 1, "header must be 'T d'"))?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(path, 1, "header must be 'T d'"));
    };
    if rows == 0 || cols == 0 {
        return Err(parse_err(path, 1, "T and d must be positive"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines {
        let line_no = idx + 1;
        seen += 1;
        if seen > rows {
            return Err(parse_err(path, line_no, format!("more than {rows} feature rows")));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("bad number '{tok}'")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, "non-finite feature value"));
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
    }
    if seen != rows {
        return Err(parse_err(
            path,
            0,
            format!("expected {rows} feature rows, found {seen}"),
        ));
    }
    Ok(Tensor::new(&[rows, cols], data).unwrap())
}

pub fn labels_to_text(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

/// Reads a label file, rejecting ids `>= num_classes`.
pub fn read_labels(path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("bad label '{line}'")))?;
        if v >= num_classes {
            return Err(parse_err(
                path,
                idx + 1,
                format!("label {v} out of range for {num_classes} classes"),
            ));
        }
        labels.push(v);
    }
    Ok(labels)
}

/// Loads the manifest at `path` and every sample it lists.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest = DatasetManifest::parse(&text, path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for files in &manifest.samples {
        let fpath = root.join(&files.features);
        let lpath = root.join(&files.labels);
        let features = read_features(&fpath)?;
        if features.cols() != manifest.feature_dim {
            return Err(parse_err(
                &fpath,
                1,
                format!(
                    "feature dimension {} does not match manifest feature_dim {}",
                    features.cols(),
                    manifest.feature_dim
                ),
            ));
        }
        let labels = read_labels(&lpath, manifest.num_classes())?;
        if labels.len() != features.rows() {
            return Err(parse_err(
                &lpath,
                0,
                format!("{} labels for {} feature rows", labels.len(), features.rows()),
            ));
        }
        samples.push(SequenceSample {
            id: files.id.clone(),
            features,
            labels,
        });
    }
    Ok(Dataset { manifest, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureFormat {
    #[default]
    Text,
    Binary,
}

/// Writes `dataset` under `dir` (manifest plus one feature and one label file
/// per sample) and returns the manifest path. File names in the written
/// manifest are derived from sample ids.
pub fn save_dataset(dataset: &Dataset, dir: &Path, format: FeatureFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = dataset.manifest.clone();
    manifest.samples = dataset
        .samples
        .iter()
        .map(|s| SampleFiles {
            id: s.id.clone(),
            features: match format {
                FeatureFormat::Text => format!("{}.feat", s.id),
                FeatureFormat::Binary => format!("{}.tric", s.id),
            }
            .into(),
            labels: format!("{}.labels", s.id).into(),
        })
        .collect();
    for (sample, files) in dataset.samples.iter().zip(&manifest.samples) {
        let fpath = dir.join(&files.features);
        match format {
            FeatureFormat::Text => fs::write(&fpath, features_to_text(&sample.features)),
            FeatureFormat::Binary => fs::write(&fpath, features_to_binary(&sample.features)),
        }
        .map_err(io_err(&fpath))?;
        let lpath = dir.join(&files.labels);
        fs::write(&lpath, labels_to_text(&sample.labels)).map_err(io_err(&lpath))?;
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_text()).map_err(io_err(&mpath))?;
    Ok(mpath)
}

/// Parameters of the synthetic procedural-activity generator.
///
/// Every video starts with a cue action and, when ambiguous pairs are
/// configured, ends with a member of an ambiguous pair. Both members of a pair
/// emit the same feature prototypes, so only the cue (through `dependency`)
/// determines the correct label. Filler actions in between carry no
/// information about the cue.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub actions_per_video: usize,
    /// Inclusive range of sub-actions per action.
    pub sub_actions: (usize, usize),
    /// Inclusive range of frames per sub-action.
    pub frames_per_sub_action: (usize, usize),
    pub feature_dim: usize,
    pub noise: f64,
    pub ambiguous_pairs: Vec<(usize, usize)>,
    /// `(cue class, label of the later ambiguous action)`.
    pub dependency: Vec<(usize, usize)>,
    /// Also place every other cue class later in the video (between fillers),
    /// so each video contains the same set of cue classes and only the
    /// identity of the first action decides the ambiguous label.
    pub cue_decoys: bool,
    pub train_videos: usize,
    pub test_videos: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            actions_per_video: 4,
            sub_actions: (1, 2),
            frames_per_sub_action: (6, 12),
            feature_dim: 8,
            noise: 0.3,
            ambiguous_pairs: vec![(4, 5)],
            dependency: vec![(0, 4), (1, 5)],
            cue_decoys: false,
            train_videos: 24,
            test_videos: 16,
            seed: 0,
        }
    }
}

const SYNTH_KEYS: [&str; 12] = [
    "classes",
    "actions_per_video",
    "sub_actions",
    "frames_per_sub_action",
    "feature_dim",
    "noise",
    "ambiguous_pairs",
    "dependency",
    "cue_decoys",
    "train_videos",
    "test_videos",
    "seed",
];

fn config_err(key: &str, msg: impl Into<String>) -> DataError {
    DataError::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    let bad = || config_err(key, format!("expected 'min-max' or a single count, got '{value}'"));
    match value.split_once('-') {
        Some((a, b)) => Ok((
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        )),
        None => {
            let n = value.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn parse_pairs(key: &str, value: &str, sep: char) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (a, b) = item
                .split_once(sep)
                .ok_or_else(|| config_err(key, format!("expected 'a{sep}b', got '{item}'")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| config_err(key, format!("bad class id '{s}'")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

impl SynthConfig {
    /// Parses `key = value` lines (an optional `[synth]` header is allowed).
    /// Unknown keys are rejected; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') || line == "[synth]" {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| config_err(line, "expected key = value"))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| config_err(key, format!("bad integer '{v}'")))
            };
            match key {
                "classes" => cfg.num_classes = num(value)?,
                "actions_per_video" => cfg.actions_per_video = num(value)?,
                "sub_actions" => cfg.sub_actions = parse_range(key, value)?,
                "frames_per_sub_action" => cfg.frames_per_sub_action = parse_range(key, value)?,
                "feature_dim" => cfg.feature_dim = num(value)?,
                "noise" => {
                    cfg.noise = value
                        .parse()
                        .map_err(|_| config_err(key, format!("bad number '{value}'")))?
                }
                "ambiguous_pairs" => cfg.ambiguous_pairs = parse_pairs(key, value, ':')?,
                "dependency" => cfg.dependency = parse_pairs(key, value, '>')?,
                "cue_decoys" => {
                    cfg.cue_decoys = value
                        .parse()
                        .map_err(|_| config_err(key, format!("expected true or false, got '{value}'")))?
                }
                "train_videos" => cfg.train_videos = num(value)?,
                "test_videos" => cfg.test_videos = num(value)?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| config_err(key, format!("bad seed '{value}'")))?
                }
                other => {
                    return Err(config_err(
                        other,
                        format!("unknown key (expected one of {})", SYNTH_KEYS.join(", ")),
                    ))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let pairs = |v: &[(usize, usize)], sep: char| {
            v.iter()
                .map(|(a, b)| format!("{a}{sep}{b}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "[synth]\nclasses = {}\nactions_per_video = {}\nsub_actions = {}-{}\nframes_per_sub_action = {}-{}\nfeature_dim = {}\nnoise = {}\nambiguous_pairs = {}\ndependency = {}\ncue_decoys = {}\ntrain_videos = {}\ntest_videos = {}\nseed = {}\n",
            self.num_classes,
            self.actions_per_video,
            self.sub_actions.0,
            self.sub_actions.1,
            self.frames_per_sub_action.0,
            self.frames_per_sub_action.1,
            self.feature_dim,
            self.noise,
            pairs(&self.ambiguous_pairs, ':'),
            pairs(&self.dependency, '>'),
            self.cue_decoys,
            self.train_videos,
            self.test_videos,
            self.seed
        )
    }

    fn ambiguous_classes(&self) -> BTreeSet<usize> {
        self.ambiguous_pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }

    fn cue_classes(&self) -> BTreeSet<usize> {
        self.dependency.iter().map(|&(c, _)| c).collect()
    }

    /// Classes used between the cue and the ambiguous action.
    pub fn filler_classes(&self) -> Vec<usize> {
        let (amb, cues) = (self.ambiguous_classes(), self.cue_classes());
        (0..self.num_classes)
            .filter(|c| !amb.contains(c) && !cues.contains(c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes;
        if n < 2 {
            return Err(config_err("classes", "need at least 2 classes"));
        }
        for (key, (lo, hi)) in [
            ("sub_actions", self.sub_actions),
            ("frames_per_sub_action", self.frames_per_sub_action),
        ] {
            if lo == 0 || lo > hi {
                return Err(config_err(key, format!("range {lo}-{hi} is empty or starts at 0")));
            }
        }
        if self.feature_dim == 0 {
            return Err(config_err("feature_dim", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err("noise", "must be a finite non-negative number"));
        }
        if self.actions_per_video == 0 {
            return Err(config_err("actions_per_video", "must be positive"));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.ambiguous_pairs {
            if a >= n || b >= n || a == b {
                return Err(config_err("ambiguous_pairs", format!("invalid pair {a}:{b}")));
            }
            if !seen.insert(a) || !seen.insert(b) {
                return Err(config_err("ambiguous_pairs", "a class appears in two pairs"));
            }
        }
        if self.ambiguous_pairs.is_empty() {
            if self.cue_decoys {
                return Err(config_err("cue_decoys", "needs ambiguous pairs and dependency rules"));
            }
            if !self.dependency.is_empty() {
                return Err(config_err("dependency", "rules given but no ambiguous pairs"));
            }
            return Ok(());
        }
        let amb = self.ambiguous_classes();
        let mut cues = BTreeSet::new();
        for &(cue, target) in &self.dependency {
            if cue >= n || target >= n {
                return Err(config_err(
                    "dependency",
                    format!("rule {cue}>{target} references an absent class"),
                ));
            }
            if amb.contains(&cue) {
                return Err(config_err("dependency", format!("cue {cue} is itself ambiguous")));
            }
            if !amb.contains(&target) {
                return Err(config_err(
                    "dependency",
                    format!("target {target} is not in an ambiguous pair"),
                ));
            }
            if !cues.insert(cue) {
                return Err(config_err("dependency", format!("cue {cue} maps to two targets")));
            }
        }
        for &c in &amb {
            if !self.dependency.iter().any(|&(_, t)| t == c) {
                return Err(config_err("dependency", format!("no cue selects ambiguous class {c}")));
            }
        }
        if self.actions_per_video < 2 {
            return Err(config_err(
                "actions_per_video",
                "need room for a cue and an ambiguous action",
            ));
        }
        let fillers = self.filler_classes().len();
        let middle = self.actions_per_video - 2;
        let decoys = if self.cue_decoys { cues.len() - 1 } else { 0 };
        if decoys > 0 && middle < 2 * decoys + 1 {
            return Err(config_err(
                "actions_per_video",
                format!(
                    "{decoys} decoy cue(s) need at least {} actions per video",
                    2 * decoys + 3
                ),
            ));
        }
        // fillers sit between decoys; any extra slots hold adjacent fillers
        let needed = match middle - decoys {
            0 => 0,
            n if n == decoys + 1 && decoys > 0 => 1,
            1 => 1,
            _ => 2,
        };
        if fillers < needed {
            return Err(config_err(
                "classes",
                format!(
                    "{fillers} filler classes, {} actions per video need {needed}",
                    self.actions_per_video
                ),
            ));
        }
        Ok(())
    }
}

/// A generated dataset plus the prototypes it was drawn from
/// (`prototypes[class][sub_action]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub prototypes: Vec<Vec<Vec<f64>>>,
}

fn unit_ball_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let radius = rng.random::<f64>().powf(1.0 / dim as f64);
    v.iter().map(|x| x / norm * radius).collect()
}

fn range_sample(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn pick_distinct(rng: &mut ChaCha8Rng, pool: &[usize], avoid: Option<usize>) -> usize {
    let choices: Vec<usize> = pool.iter().copied().filter(|&c| Some(c) != avoid).collect();
    choices[rng.random_range(0..choices.len())]
}

fn video_actions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = cfg.actions_per_video;
    if cfg.ambiguous_pairs.is_empty() {
        let all: Vec<usize> = (0..cfg.num_classes).collect();
        let mut actions: Vec<usize> = Vec::with_capacity(n);
        for _ in 0..n {
            let next = pick_distinct(rng, &all, actions.last().copied());
            actions.push(next);
        }
        return actions;
    }
    let (a, b) = cfg.ambiguous_pairs[rng.random_range(0..cfg.ambiguous_pairs.len())];
    let target = if rng.random::<bool>() { a } else { b };
    let cues: Vec<usize> = cfg
        .dependency
        .iter()
        .filter(|&&(_, t)| t == target)
        .map(|&(c, _)| c)
        .collect();
    let cue = cues[rng.random_range(0..cues.len())];
    let fillers = cfg.filler_classes();
    let mut decoys: Vec<usize> = Vec::new();
    if cfg.cue_decoys {
        decoys = cfg.cue_classes().into_iter().filter(|&c| c != cue).collect();
        decoys.shuffle(rng);
    }
    let mut decoys = decoys.into_iter();
    let mut actions = vec![cue];
    for slot in 0..n - 2 {
        if slot % 2 == 1 {
            if let Some(d) = decoys.next() {
                actions.push(d);
                continue;
            }
        }
        let prev = actions.last().copied().filter(|p| fillers.contains(p));
        actions.push(pick_distinct(rng, &fillers, prev));
    }
    actions.push(target);
    actions
}

/// Generates `train` and `test` splits; a pure function of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_sub = cfg.sub_actions.1;
    let mut prototypes: Vec<Vec<Vec<f64>>> = (0..cfg.num_classes)
        .map(|_| {
            (0..max_sub)
                .map(|_| unit_ball_point(&mut rng, cfg.feature_dim))
                .collect()
        })
        .collect();
    for &(a, b) in &cfg.ambiguous_pairs {
        prototypes[b] = prototypes[a].clone();
    }

    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for (split, count) in [("train", cfg.train_videos), ("test", cfg.test_videos)] {
        let mut ids = Vec::with_capacity(count);
        for v in 0..count {
            let id = format!("{split}-{v:04}");
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for action in video_actions(cfg, &mut rng) {
                let subs = range_sample(&mut rng, cfg.sub_actions);
                for proto in prototypes[action].iter().take(subs) {
                    let frames = range_sample(&mut rng, cfg.frames_per_sub_action);
                    for _ in 0..frames {
                        for &p in proto {
                            let eps: f64 = rng.sample(StandardNormal);
                            features.push(p + cfg.noise * eps);
                        }
                        labels.push(action);
                    }
                }
            }
            let steps = labels.len();
            samples.push(SequenceSample {
                id: id.clone(),
                features: Tensor::new(&[steps, cfg.feature_dim], features).unwrap(),
                labels,
            });
            ids.push(id);
        }
        splits.push(Split {
            name: split.to_string(),
            ids,
        });
    }

    let manifest = DatasetManifest {
        class_names: (0..cfg.num_classes).map(|c| format!("a{c}")).collect(),
        background: None,
        feature_dim: cfg.feature_dim,
        shared_splits: false,
        samples: samples
            .iter()
            .map(|s| SampleFiles {
                id: s.id.clone(),
                features: format!("{}.feat", s.id).into(),
                labels: format!("{}.labels", s.id).into(),
            })
            .collect(),
        splits,
    };
    Ok(SynthDataset {
        dataset: Dataset { manifest, samples },
        prototypes,
    })
}

/// Fraction of frames whose label belongs to an ambiguous pair.
pub fn ambiguous_fraction<'a>(samples: impl IntoIterator<Item = &'a SequenceSample>, pairs: &[(usize, usize)]) -> f64 {
    let amb: BTreeSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        total += s.labels.len();
        hit += s.labels.iter().filter(|l| amb.contains(l)).count();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Best achievable frame accuracy (percent) for any classifier that sees one
/// frame at a time, when a fraction `p` of frames falls in balanced ambiguous
/// pairs: `(1 - p / 2) * 100`.
pub fn frame_local_ceiling(p: f64) -> f64 {
    (1.0 - p / 2.0) * 100.0
}

const GLYPHS: &[u8] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";

fn glyph(class: usize) -> char {
    GLYPHS.get(class).map_or('?', |&b| b as char)
}

/// Renders aligned per-frame glyph rows (ground truth first, when given)
/// followed by one summary line per predicted segment.
pub fn export_timeline(pred: &[usize], gt: Option<&[usize]>, class_names: &[String]) -> Result<String> {
    if pred.is_empty() {
        return Err(DataError::Invalid("cannot render an empty timeline".into()));
    }
    if let Some(gt) = gt {
        if gt.len() != pred.len() {
            return Err(DataError::Invalid(format!(
                "timeline length mismatch: {} predicted vs {} ground-truth frames",
                pred.len(),
                gt.len()
            )));
        }
    }
    let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
    let row = |labels: &[usize]| labels.iter().map(|&l| glyph(l)).collect::<String>();
    let mut out = String::new();
    let used: BTreeMap<usize, ()> = pred.iter().chain(gt.unwrap_or(&[])).map(|&c| (c, ())).collect();
    let legend: Vec<String> = used.keys().map(|&c| format!("{}={}", glyph(c), name(c))).collect();
    let _ = writeln!(out, "legend: {}", legend.join(" "));
    if let Some(gt) = gt {
        let _ = writeln!(out, "gt   | {}", row(gt));
    }
    let _ = writeln!(out, "pred | {}", row(pred));
    let _ = writeln!(out, "segments (pred):");
    for s in segments_from_labels(pred, None) {
        let _ = writeln!(out, "  {:>6} {:>6} {:>6}  {}", s.start, s.end, s.len(), name(s.label));
    }
    Ok(out)
}
