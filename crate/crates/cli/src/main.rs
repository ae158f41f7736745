//! `tricornet` command-line tool.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 training divergence.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tricornet::data::{
    export_timeline, load_dataset, read_features, read_labels, save_dataset, synth_generate, Dataset, FeatureFormat,
    SynthConfig,
};
use tricornet::experiment::{run_dependency_experiment, ExperimentConfig};
use tricornet::gradcheck::{gradcheck_model, toy_config, toy_input, GradcheckOptions};
use tricornet::model::{Model, Variant};
use tricornet::train::{evaluate_samples, predict, train_with_progress, TrainError};

use config::RunConfig;

const REPORT_TXT: &str = "report.txt";
const REPORT_KV: &str = "report.kv";
const CHECKPOINT: &str = "checkpoint.bin";
const RESOLVED: &str = "resolved.cfg";

#[derive(Parser)]
#[command(name = "tricornet", version, about = "Temporal action segmentation with TricorNet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a `[synth]` config.
    Synth(SynthArgs),
    /// Train a model and write checkpoint.bin plus reports.
    Train(RunArgs),
    /// Score a checkpoint on one split of the dataset.
    Eval(EvalArgs),
    /// Label the frames of one feature file.
    Predict(PredictArgs),
    /// Check backprop against finite differences on a toy model.
    Gradcheck(GradcheckArgs),
    /// Describe a checkpoint, a run config or a dataset.
    Inspect(InspectArgs),
    /// Run the long-range dependency experiment (full vs conv-only).
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Binary,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to `eval.split` from the config.
    #[arg(long)]
    split: Option<String>,
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth labels to show in the timeline.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// full, high, low, conv-only or all.
    #[arg(long, default_value = "all")]
    variant: String,
    /// Coordinates per parameter block, or `all`.
    #[arg(long, default_value = "256")]
    max_coords: String,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corrupt the analytic gradient of one block (sensitivity check).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, conflicts_with_all = ["config", "manifest"])]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Sequence length used for the layer table.
    #[arg(long, default_value_t = 100)]
    steps: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<TrainError>() {
            Some(TrainError::Divergence { .. }) => 3,
            _ => 2,
        };
        Failure { code, error }
    }
}

type CmdResult = Result<u8, Failure>;

macro_rules! fail {
    ($($arg:tt)*) => {
        return Err(anyhow!($($arg)*).into())
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg = SynthConfig::parse(&text).with_context(|| format!("in {}", a.config.display()))?;
    let synth = synth_generate(&cfg)?;
    let format = match a.format {
        Format::Text => FeatureFormat::Text,
        Format::Binary => FeatureFormat::Binary,
    };
    let manifest = save_dataset(&synth.dataset, &a.out, format)?;
    write_file(&a.out, RESOLVED, cfg.to_text())?;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        synth.dataset.samples.len(),
        cfg.train_videos,
        cfg.test_videos,
        manifest.display()
    );
    Ok(0)
}

fn load_run(config: &Path, overrides: &[String]) -> anyhow::Result<(RunConfig, Dataset)> {
    let cfg = RunConfig::load(config, overrides)?;
    let ds = load_dataset(&cfg.manifest).with_context(|| format!("loading dataset {}", cfg.manifest.display()))?;
    Ok((cfg, ds))
}

fn cmd_train(a: RunArgs) -> CmdResult {
    let (cfg, ds) = load_run(&a.config, &a.overrides)?;
    let train_set = ds.split(&cfg.train_split)?;
    let val_set = match &cfg.val_split {
        Some(name) => ds.split(name)?,
        None => Vec::new(),
    };
    let mut model = Model::build(cfg.model_config(ds.manifest.feature_dim, ds.manifest.num_classes()))?;
    create_dir(&a.out)?;
    write_file(&a.out, RESOLVED, cfg.to_text())?;
    let opts = cfg.train_options(ds.manifest.background);
    let quiet = a.quiet;
    let report = train_with_progress(&mut model, &train_set, &val_set, &opts, |e| {
        if !quiet {
            let val = e.validation.as_ref().map_or(String::new(), |m| {
                format!(" val_acc {:.2} val_edit {:.2}", m.accuracy, m.edit)
            });
            eprintln!(
                "epoch {:>4} loss {:.6} train_acc {:.2}{val}",
                e.epoch, e.loss, e.train_accuracy
            );
        }
    })?;
    model.save(&a.out.join(CHECKPOINT), &ds.manifest.class_names)?;
    let mut txt = report.to_table();
    if let Some(m) = report.final_validation() {
        let _ = write!(
            txt,
            "\nfinal validation ({}):\n{}",
            cfg.val_split.as_deref().unwrap_or("-"),
            m.to_table()
        );
    }
    write_file(&a.out, REPORT_TXT, &txt)?;
    write_file(&a.out, REPORT_KV, report.to_kv())?;
    println!("{txt}");
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (cfg, ds) = load_run(&a.config, &a.overrides)?;
    let split = a.split.unwrap_or_else(|| cfg.eval_split.clone());
    let samples = ds.split(&split)?;
    if samples.is_empty() {
        fail!("split '{split}' is empty");
    }
    let ckpt = a.checkpoint.unwrap_or_else(|| a.out.join(CHECKPOINT));
    let (model, class_names) = Model::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mc = model.config();
    if mc.input_dim != ds.manifest.feature_dim || class_names != ds.manifest.class_names {
        fail!(
            "checkpoint expects d={} and classes [{}]; dataset has d={} and classes [{}]",
            mc.input_dim,
            class_names.join(","),
            ds.manifest.feature_dim,
            ds.manifest.class_names.join(",")
        );
    }
    let report = evaluate_samples(&model, &samples, &cfg.eval_options(ds.manifest.background))?
        .ok_or_else(|| anyhow!("nothing to evaluate"))?;
    create_dir(&a.out)?;
    write_file(&a.out, RESOLVED, cfg.to_text())?;
    let txt = format!("split {split}: {} sequences\n{}", samples.len(), report.to_table());
    write_file(&a.out, REPORT_TXT, &txt)?;
    write_file(&a.out, REPORT_KV, report.to_kv())?;
    print!("{txt}");
    Ok(0)
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let (model, class_names) =
        Model::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let x = read_features(&a.features)?;
    let d = model.config().input_dim;
    if x.cols() != d {
        fail!(
            "{}: feature width {} does not match the checkpoint's input width {d}",
            a.features.display(),
            x.cols()
        );
    }
    let gt = match &a.labels {
        Some(p) => {
            let gt = read_labels(p, class_names.len())?;
            if gt.len() != x.rows() {
                fail!("{}: {} labels for {} frames", p.display(), gt.len(), x.rows());
            }
            Some(gt)
        }
        None => None,
    };
    let labels = predict(&model, &x)?;
    create_dir(&a.out)?;
    write_file(&a.out, "labels.txt", tricornet::data::labels_to_text(&labels))?;
    let timeline = export_timeline(&labels, gt.as_deref(), &class_names)?;
    write_file(&a.out, "timeline.txt", &timeline)?;
    print!("{timeline}");
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let variants: Vec<Variant> = if a.variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![a.variant.parse()?]
    };
    let max_coords = match a.max_coords.as_str() {
        "all" => None,
        n => Some(
            n.parse::<usize>()
                .map_err(|_| anyhow!("--max-coords expects a count or 'all', got '{n}'"))?,
        ),
    };
    if a.steps == 0 {
        fail!("--steps must be at least 1");
    }
    let opts = GradcheckOptions {
        max_coords,
        seed: a.seed,
        inject_fault: a.inject_fault,
        ..GradcheckOptions::default()
    };
    let mut txt = String::new();
    let mut kv = String::new();
    let mut all_passed = true;
    for v in variants {
        let cfg = toy_config(v);
        let model = Model::build(cfg.clone())?;
        let (x, labels) = toy_input(&cfg, a.steps, a.seed);
        let report = gradcheck_model(&model, &x, &labels, &opts)?;
        all_passed &= report.passed();
        let table = report.to_table();
        println!("{table}");
        txt.push_str(&table);
        txt.push('\n');
        for b in &report.blocks {
            let _ = writeln!(kv, "{v}.{}={}", b.name, b.max_rel_error);
        }
        let _ = writeln!(kv, "{v}.passed={}", report.passed());
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(out, REPORT_TXT, &txt)?;
        write_file(out, REPORT_KV, &kv)?;
    }
    println!("{}", if all_passed { "gradcheck PASS" } else { "gradcheck FAIL" });
    Ok(if all_passed { 0 } else { 1 })
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    if let Some(path) = &a.checkpoint {
        let (model, class_names) = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
        println!("checkpoint {}", path.display());
        println!("classes: {}", class_names.join(", "));
        print_model(&model, a.steps);
    } else if let Some(path) = &a.config {
        let (cfg, ds) = load_run(path, &[])?;
        print!("{}", cfg.to_text());
        println!();
        let model = Model::build(cfg.model_config(ds.manifest.feature_dim, ds.manifest.num_classes()))?;
        print_model(&model, a.steps);
    } else if let Some(path) = &a.manifest {
        let ds = load_dataset(path)?;
        let m = &ds.manifest;
        println!("dataset {}", path.display());
        println!("classes ({}): {}", m.num_classes(), m.class_names.join(", "));
        println!("background: {}", m.background.map_or("none".into(), |b| b.to_string()));
        println!("feature_dim: {}", m.feature_dim);
        println!("samples: {}", ds.samples.len());
        for split in &m.splits {
            let lens: Vec<usize> = ds.split(&split.name)?.iter().map(|s| s.len()).collect();
            let frames: usize = lens.iter().sum();
            println!(
                "split {}: {} sequences, {} frames, T in [{}, {}]",
                split.name,
                lens.len(),
                frames,
                lens.iter().min().unwrap_or(&0),
                lens.iter().max().unwrap_or(&0)
            );
        }
    } else {
        fail!("inspect needs one of --checkpoint, --config or --manifest");
    }
    Ok(0)
}

fn print_model(model: &Model, steps: usize) {
    print!("{}", model.describe_table(steps));
    println!("parameter blocks:");
    for p in model.params() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        println!("  {:<28} {}", p.name, shape.join("x"));
    }
}

fn cmd_experiment(a: ExperimentArgs) -> CmdResult {
    let mut cfg = ExperimentConfig::default();
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if cfg.seeds.is_empty() {
        fail!("--seeds must list at least one seed");
    }
    let report = run_dependency_experiment(&cfg, |r| {
        eprintln!(
            "seed {}: full amb {:.2}, conv-only amb {:.2}",
            r.seed, r.full.ambiguous, r.conv_only.ambiguous
        )
    })?;
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(out, REPORT_TXT, &table)?;
        let full = report.median_full();
        let conv = report.median_conv_only();
        let kv = format!(
            "full.overall={}\nfull.ambiguous={}\nconv_only.overall={}\nconv_only.ambiguous={}\nceiling={}\ngap={}\npassed={}\n",
            full.overall,
            full.ambiguous,
            conv.overall,
            conv.ambiguous,
            report.median_ceiling(),
            report.ambiguous_gap(),
            report.passed()
        );
        write_file(out, REPORT_KV, kv)?;
    }
    Ok(if report.passed() { 0 } else { 1 })
}
