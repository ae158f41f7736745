//! TricorNet assembly: encoder of temporal convolutions, variant-specific
//! middle and decoder, per-frame softmax output.
//!
//! A model is a flat list of named parameter tensors plus a layer plan that
//! refers to them by index. Forward passes record onto a fresh [`Tape`] so the
//! same code serves inference and training.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::layers::{self, Conv1DParams, DenseParams, LstmParams};
use crate::tensor::{Tensor, TensorError};

pub const MAX_LAYERS: usize = 4;
const CHECKPOINT_MAGIC: &[u8; 8] = b"TRICKPT\n";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Convolutional encoder, Bi-LSTM decoder.
    Full,
    /// Bi-LSTM only at the bottleneck; convolutional decoder.
    High,
    /// Bi-LSTM only in the last decoder layer.
    Low,
    /// Recurrence-free ablation: `High` without its Bi-LSTM.
    ConvOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::High, Variant::Low, Variant::ConvOnly];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::High => "high",
            Variant::Low => "low",
            Variant::ConvOnly => "conv-only",
        })
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "high" => Ok(Variant::High),
            "low" => Ok(Variant::Low),
            "conv-only" | "convonly" | "conv_only" => Ok(Variant::ConvOnly),
            other => Err(ModelError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Encoder and decoder depth `K`.
    pub layers: usize,
    /// Temporal kernel length `L`.
    pub conv_len: usize,
    /// Hidden size per LSTM direction, shared by every Bi-LSTM.
    pub hidden: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub variant: Variant,
    pub dropout_conv: f64,
    pub dropout_lstm: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults: `K = 2`, `L = 30`, `H = 64`, dropout 0.3, full variant.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            layers: 2,
            conv_len: 30,
            hidden: 64,
            num_classes,
            input_dim,
            variant: Variant::Full,
            dropout_conv: 0.3,
            dropout_lstm: 0.3,
            seed: 0,
        }
    }

    /// Filter count of encoder layer `i` (1-based): `32 + 32 i`.
    pub fn filters(i: usize) -> usize {
        32 + 32 * i
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if !(1..=MAX_LAYERS).contains(&self.layers) {
            return fail(format!("layers must be in 1..={MAX_LAYERS}, got {}", self.layers));
        }
        if self.conv_len == 0 {
            return fail("conv_len must be at least 1".into());
        }
        if self.hidden == 0 {
            return fail("hidden must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.input_dim == 0 {
            return fail("input_dim must be at least 1".into());
        }
        for (name, rate) in [("dropout_conv", self.dropout_conv), ("dropout_lstm", self.dropout_lstm)] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name} must lie in [0, 1), got {rate}"));
            }
        }
        Ok(())
    }

    /// `key=value` lines, the form stored in checkpoints.
    pub fn to_kv(&self) -> String {
        format!(
            "variant={}\nlayers={}\nconv_len={}\nhidden={}\nnum_classes={}\ninput_dim={}\ndropout_conv={}\ndropout_lstm={}\nseed={}\n",
            self.variant,
            self.layers,
            self.conv_len,
            self.hidden,
            self.num_classes,
            self.input_dim,
            self.dropout_conv,
            self.dropout_lstm,
            self.seed
        )
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = map
                .get(key)
                .ok_or_else(|| ModelError::Config(format!("missing key '{key}'")))?;
            raw.parse()
                .map_err(|_| ModelError::Config(format!("bad value '{raw}' for '{key}'")))
        }
        let cfg = Self {
            variant: map
                .get("variant")
                .ok_or_else(|| ModelError::Config("missing key 'variant'".into()))?
                .parse()?,
            layers: get(map, "layers")?,
            conv_len: get(map, "conv_len")?,
            hidden: get(map, "hidden")?,
            num_classes: get(map, "num_classes")?,
            input_dim: get(map, "input_dim")?,
            dropout_conv: get(map, "dropout_conv")?,
            dropout_lstm: get(map, "dropout_lstm")?,
            seed: get(map, "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// One step of the layer plan. Parameter references are indices into
/// [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Conv(Conv1DParams<usize>),
    NormRelu,
    SpatialDropout,
    MaxPool,
    Upsample,
    BiLstm {
        fwd: LstmParams<usize>,
        bwd: LstmParams<usize>,
    },
    Dropout,
    Output(DenseParams<usize>),
}

impl Stage {
    fn kind(&self) -> &'static str {
        match self {
            Stage::Conv(_) => "conv1d",
            Stage::NormRelu => "norm_relu",
            Stage::SpatialDropout => "spatial_dropout",
            Stage::MaxPool => "max_pool",
            Stage::Upsample => "upsample",
            Stage::BiLstm { .. } => "bilstm",
            Stage::Dropout => "dropout",
            Stage::Output(_) => "dense_softmax",
        }
    }

    fn param_indices(&self) -> Vec<usize> {
        match self {
            Stage::Conv(p) => vec![p.kernels, p.bias],
            Stage::BiLstm { fwd, bwd } => fwd.blocks().into_iter().chain(bwd.blocks()).copied().collect(),
            Stage::Output(p) => vec![p.w, p.b],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PlanEntry {
    block: String,
    stage: Stage,
}

/// One row of [`Model::describe`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: [usize; 2],
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedParam>,
    plan: Vec<PlanEntry>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<NamedParam>,
    plan: Vec<PlanEntry>,
}

impl Builder {
    fn push_param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(NamedParam { name, value });
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-limit..limit)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn stage(&mut self, block: &str, stage: Stage) {
        self.plan.push(PlanEntry {
            block: block.to_string(),
            stage,
        });
    }

    /// conv -> norm_relu -> spatial dropout; returns the output width.
    fn conv_block(&mut self, block: &str, c_in: usize, filters: usize, len: usize) -> usize {
        let kernels = self.uniform(&[filters, c_in, len], c_in * len, filters * len);
        let kernels = self.push_param(format!("{block}.conv.kernels"), kernels);
        let bias = self.push_param(format!("{block}.conv.bias"), Tensor::zeros(&[filters]));
        self.stage(block, Stage::Conv(Conv1DParams { kernels, bias }));
        self.stage(block, Stage::NormRelu);
        self.stage(block, Stage::SpatialDropout);
        filters
    }

    fn lstm_direction(&mut self, prefix: &str, d_in: usize, hidden: usize) -> LstmParams<usize> {
        let names = LstmParams::<usize>::BLOCK_NAMES;
        let ids: [usize; 12] = std::array::from_fn(|k| {
            let value = match k {
                0..=3 => self.uniform(&[hidden, d_in], d_in, hidden),
                4..=7 => self.uniform(&[hidden, hidden], hidden, hidden),
                // forget gate bias
                9 => Tensor::ones(&[hidden]),
                _ => Tensor::zeros(&[hidden]),
            };
            self.push_param(format!("{prefix}.{}", names[k]), value)
        });
        LstmParams::from_blocks(ids)
    }

    fn bilstm_block(&mut self, block: &str, d_in: usize, hidden: usize) -> usize {
        let fwd = self.lstm_direction(&format!("{block}.bilstm.fwd"), d_in, hidden);
        let bwd = self.lstm_direction(&format!("{block}.bilstm.bwd"), d_in, hidden);
        self.stage(block, Stage::BiLstm { fwd, bwd });
        2 * hidden
    }
}

impl Model {
    /// Initializes parameters from `config.seed` and wires the variant.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.layers;
        let (len, hidden) = (config.conv_len, config.hidden);
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: Vec::new(),
            plan: Vec::new(),
        };

        let mut width = config.input_dim;
        for i in 1..=k {
            let block = format!("enc{i}");
            width = b.conv_block(&block, width, ModelConfig::filters(i), len);
            b.stage(&block, Stage::MaxPool);
        }

        if config.variant == Variant::High {
            width = b.bilstm_block("mid", width, hidden);
        }

        for i in 1..=k {
            let block = format!("dec{i}");
            let recurrent = match config.variant {
                Variant::Full => true,
                Variant::Low => i == k,
                Variant::High | Variant::ConvOnly => false,
            };
            b.stage(&block, Stage::Upsample);
            if recurrent {
                width = b.bilstm_block(&block, width, hidden);
                if i < k {
                    b.stage(&block, Stage::Dropout);
                }
            } else {
                width = b.conv_block(&block, width, ModelConfig::filters(k + 1 - i), len);
            }
        }

        let c = config.num_classes;
        let w = b.uniform(&[c, width], width, c);
        let w = b.push_param("out.dense.w".into(), w);
        let bias = b.push_param("out.dense.b".into(), Tensor::zeros(&[c]));
        b.stage("out", Stage::Output(DenseParams { w, b: bias }));

        Ok(Self {
            config,
            params: b.params,
            plan: b.plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of Bi-LSTM blocks in the plan.
    pub fn bilstm_blocks(&self) -> usize {
        self.plan
            .iter()
            .filter(|e| matches!(e.stage, Stage::BiLstm { .. }))
            .count()
    }

    /// Registers every parameter as a tape leaf, in [`Self::params`] order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Time length after padding to a multiple of `2^K`.
    pub fn padded_len(&self, steps: usize) -> usize {
        let unit = 1 << self.config.layers;
        steps.div_ceil(unit) * unit
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.input_dim {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![x.shape().first().copied().unwrap_or(0), self.config.input_dim],
            }));
        }
        Ok(())
    }

    /// Repeats the last frame until the length is a multiple of `2^K`.
    fn pad(&self, x: &Tensor) -> Tensor {
        let steps = x.rows();
        let target = self.padded_len(steps);
        if target == steps {
            return x.clone();
        }
        let mut data = x.data().to_vec();
        let last = x.row(steps - 1).to_vec();
        for _ in steps..target {
            data.extend_from_slice(&last);
        }
        Tensor::new(&[target, x.cols()], data).unwrap()
    }

    /// Records a full forward pass; returns `T x c` class probabilities with
    /// `T` equal to the unpadded input length.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_input(x)?;
        let steps = x.rows();
        let mut h = tape.leaf(self.pad(x));
        for entry in &self.plan {
            h = match &entry.stage {
                Stage::Conv(p) => {
                    let p = Conv1DParams {
                        kernels: params[p.kernels],
                        bias: params[p.bias],
                    };
                    layers::conv1d_same(tape, h, &p)?
                }
                Stage::NormRelu => layers::norm_relu(tape, h),
                Stage::SpatialDropout => layers::spatial_dropout(tape, h, self.config.dropout_conv, rng, training)?,
                Stage::MaxPool => layers::max_pool_time(tape, h)?,
                Stage::Upsample => layers::upsample_repeat(tape, h)?,
                Stage::BiLstm { fwd, bwd } => {
                    let f = LstmParams::from_blocks(fwd.blocks().map(|&i| params[i]));
                    let b = LstmParams::from_blocks(bwd.blocks().map(|&i| params[i]));
                    layers::bilstm(tape, h, &f, &b)?
                }
                Stage::Dropout => layers::dropout(tape, h, self.config.dropout_lstm, rng, training)?,
                Stage::Output(p) => {
                    let p = DenseParams {
                        w: params[p.w],
                        b: params[p.b],
                    };
                    layers::time_softmax_dense(tape, h, &p)?
                }
            };
        }
        if tape.value(h).rows() != steps {
            h = tape.slice(h, 0, 0, steps)?;
        }
        Ok(h)
    }

    /// Inference-mode class probabilities, `T x c`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape);
        // inference never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_on_tape(&mut tape, &params, x, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// Per-layer output shapes at time length `steps` and parameter counts.
    pub fn describe(&self, steps: usize) -> Vec<LayerSummary> {
        let mut shape = [self.padded_len(steps.max(1)), self.config.input_dim];
        let mut rows = Vec::with_capacity(self.plan.len());
        for entry in &self.plan {
            let params: usize = entry
                .stage
                .param_indices()
                .iter()
                .map(|&i| self.params[i].value.len())
                .sum();
            match &entry.stage {
                Stage::Conv(p) => shape[1] = self.params[p.kernels].value.shape()[0],
                Stage::MaxPool => shape[0] /= 2,
                Stage::Upsample => shape[0] *= 2,
                Stage::BiLstm { fwd, .. } => shape[1] = 2 * self.params[fwd.w_hi].value.rows(),
                Stage::Output(_) => shape = [steps.max(1), self.config.num_classes],
                _ => {}
            }
            rows.push(LayerSummary {
                name: format!("{}.{}", entry.block, entry.stage.kind()),
                kind: entry.stage.kind(),
                output_shape: shape,
                params,
            });
        }
        rows
    }

    /// [`Self::describe`] rendered as an aligned text table.
    pub fn describe_table(&self, steps: usize) -> String {
        let rows = self.describe(steps);
        let mut out = format!(
            "model: variant={} K={} L={} H={} d={} c={}\n",
            self.config.variant,
            self.config.layers,
            self.config.conv_len,
            self.config.hidden,
            self.config.input_dim,
            self.config.num_classes
        );
        out.push_str(&format!(
            "{:<24} {:<16} {:>14} {:>12}\n",
            "layer", "type", "output", "params"
        ));
        for r in &rows {
            let shape = format!("{}x{}", r.output_shape[0], r.output_shape[1]);
            out.push_str(&format!(
                "{:<24} {:<16} {:>14} {:>12}\n",
                r.name, r.kind, shape, r.params
            ));
        }
        out.push_str(&format!("total parameters: {}\n", self.num_parameters()));
        out
    }

    /// Serializes the model. `class_names` travel with the checkpoint so
    /// predictions can be rendered without the original manifest.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W, class_names: &[String]) -> Result<()> {
        let mut meta = self.config.to_kv();
        meta.push_str(&format!("class_names={}\n", class_names.join(",")));
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_len(w, meta.len())?;
        w.write_all(meta.as_bytes())?;
        write_len(w, self.params.len())?;
        for p in &self.params {
            write_len(w, p.name.len())?;
            w.write_all(p.name.as_bytes())?;
            write_len(w, p.value.rank())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, rebuilds the model from its config and validates
    /// every stored tensor's name and shape against that config.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Self, Vec<String>)> {
        let bad = |msg: String| ModelError::Checkpoint(msg);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        let meta = String::from_utf8(read_bytes(r, meta_len)?).map_err(|_| bad("metadata is not UTF-8".into()))?;
        let map = parse_kv_lines(&meta);
        let config = ModelConfig::from_kv(&map)?;
        let class_names: Vec<String> = map
            .get("class_names")
            .filter(|s| !s.is_empty())
            .map(|s| s.split(',').map(str::to_string).collect())
            .unwrap_or_default();

        let mut model = Model::build(config)?;
        let count = read_u32(r)? as usize;
        if count != model.params.len() {
            return Err(bad(format!("expected {} tensors, found {count}", model.params.len())));
        }
        for slot in &mut model.params {
            let name_len = read_u32(r)? as usize;
            let name =
                String::from_utf8(read_bytes(r, name_len)?).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            if name != slot.name {
                return Err(bad(format!("expected tensor '{}', found '{name}'", slot.name)));
            }
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                shape.push(u64::from_le_bytes(buf) as usize);
            }
            if shape != slot.value.shape() {
                return Err(bad(format!(
                    "tensor '{name}' has shape {shape:?}, config requires {:?}",
                    slot.value.shape()
                )));
            }
            let raw = read_bytes(r, slot.value.len() * 8)?;
            for (dst, chunk) in slot.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok((model, class_names))
    }

    pub fn save(&self, path: &Path, class_names: &[String]) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, class_names)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub(crate) fn parse_kv_lines(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn write_len<W: Write>(w: &mut W, n: usize) -> io::Result<()> {
    w.write_all(&(n as u32).to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
