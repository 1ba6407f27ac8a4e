//! The `mixshare` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 runtime
//! failure (including a failed gradient check).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{self, CifarKind, SyntheticSpec};
use crate::diagnostics::{self, SharingReport, VarianceSection};
use crate::error::{Error, Result};
use crate::gradcheck::{self, ModelCheck};
use crate::mask;
use crate::model::{BnMode, MimoModel};
use crate::rng::Rng;
use crate::train::{self, SeedStreams, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "sharing_report.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Parser)]
#[command(name = "mixshare", version, about = "MIMO ensembles with feature unmixing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics, checkpoint, sharing report and config echo.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its validation split; prints JSON.
    Eval(EvalArgs),
    /// Write a sharing report for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of the configured model's training loss.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset in CIFAR binary layout.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the `config.json` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the `config.json` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; defaults to `sharing_report.json` next to the checkpoint.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Add variance importances after each residual group.
    #[arg(long)]
    pub variance: bool,
    /// Validation images swept by the variance diagnostic.
    #[arg(long, default_value_t = 200)]
    pub variance_samples: usize,
    /// Dump the first training batch's masks (and the variance mask) as CSV
    /// grids under `masks/` next to the report.
    #[arg(long)]
    pub dump_masks: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    pub batch: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Layout {
    Cifar10,
    Cifar100,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Record layout; CIFAR-10 unless there are more than 10 classes.
    #[arg(long, value_enum)]
    pub layout: Option<Layout>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(dir) = a.output_dir {
        config.output_dir = dir;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        config.epochs = epochs;
    }
    let outcome = run_training(&config)?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(EXIT_OK)
}

/// Everything `train` does for a resolved config: writes `config.json`,
/// `metrics.csv` (row by row), `model.ckpt`, the sharing report and
/// `eval.json` into `output_dir`. Returns the `eval.json` document.
pub fn run_training(config: &ExperimentConfig) -> Result<serde_json::Value> {
    config.validate()?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), config.to_json())?;

    let mut streams = SeedStreams::new(config.seed);
    let (train_set, val_set) = config.load_split(&mut streams.data)?;
    let mut model = MimoModel::build(config.mimo(), &mut streams.model)?;
    log::info!(
        "training {} examples, validating on {}, {} parameters",
        train_set.len(),
        val_set.len(),
        model.params().numel()
    );

    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let mut write_err = None;
    let log = train::fit(&mut model, &train_set, &val_set, &config.train(), &mut streams.train, |rec| {
        if write_err.is_none() {
            if let Err(e) = writeln!(metrics, "{}", rec.csv_row()).and_then(|_| metrics.flush()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }

    checkpoint::write(&dir.join(CHECKPOINT_FILE), model.state())?;
    let report = SharingReport::from_model(&model, config.to_value())?;
    diagnostics::write_report(&report, &dir.join(REPORT_FILE))?;
    let final_eval = match log.last() {
        Some(r) => r.eval.clone(),
        None => train::evaluate(&model, &val_set, config.eval_batch_size)?,
    };
    let doc = json!({
        "config": config.to_value(),
        "normalization": val_set.normalization(),
        "final": final_eval,
        "share_rate_classifier": report.share_rate_classifier,
        "share_rate_encoder": report.share_rate_encoder,
    });
    write_file(&dir.join(EVAL_FILE), serde_json::to_string_pretty(&doc)?)?;
    Ok(doc)
}

fn resolve_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<ExperimentConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    ExperimentConfig::load(&path)
}

/// Config and the model restored from `checkpoint`.
fn restore(checkpoint_path: &Path, config: Option<&Path>) -> Result<(ExperimentConfig, MimoModel)> {
    let config = resolve_config(checkpoint_path, config)?;
    let mut model = MimoModel::build(config.mimo(), &mut Rng::new(config.seed))?;
    model.load_state(&checkpoint::read(checkpoint_path)?)?;
    Ok((config, model))
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let (config, model) = restore(&a.checkpoint, a.config.as_deref())?;
    let mut streams = SeedStreams::new(config.seed);
    let (_, val) = config.load_split(&mut streams.data)?;
    let result = train::evaluate(&model, &val, config.eval_batch_size)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(EXIT_OK)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<i32> {
    let (config, model) = restore(&a.checkpoint, a.config.as_deref())?;
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join(REPORT_FILE));
    let out_dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut report = SharingReport::from_model(&model, config.to_value())?;
    let mut streams = SeedStreams::new(config.seed);

    let mut variance_mask = None;
    let mut pearsons = Vec::new();
    if a.variance {
        let (_, val) = config.load_split(&mut streams.data)?;
        let (sweep, fixed, mask) = variance_inputs(&val, a.variance_samples, &mut streams.analysis)?;
        let mut sections = Vec::new();
        for block in 1..=3 {
            let importance = diagnostics::variance_importance(&model, &sweep, &fixed, block, &mask, config.eval_batch_size)?;
            let pearson = diagnostics::pearson(&importance[0], &importance[1]);
            pearsons.push(pearson);
            sections.push(VarianceSection {
                block_index: block,
                importance,
                pearson,
            });
        }
        report.variance_importance = Some(sections);
        variance_mask = Some(mask);
    }
    let written = diagnostics::write_report(&report, &out)?;

    if a.dump_masks {
        let dir = out_dir.join("masks");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut streams = SeedStreams::new(config.seed);
        let (train_set, _) = config.load_split(&mut streams.data)?;
        let batches = train::build_batches(train_set.len(), train_set.image_size(), &config.train(), &mut streams.train)?;
        let mut index = String::from("file,kappa\n");
        if let Some(batch) = batches.first() {
            for (i, m) in batch.masks.iter().enumerate() {
                let name = format!("train_mask_{i}.csv");
                write_file(&dir.join(&name), m.to_csv())?;
                index.push_str(&format!("{name},{}\n", m.kappa()));
            }
        }
        if let Some(m) = &variance_mask {
            write_file(&dir.join("variance_mask.csv"), m.to_csv())?;
            index.push_str(&format!("variance_mask.csv,{}\n", m.kappa()));
        }
        write_file(&dir.join("index.csv"), index)?;
    }

    let summary = json!({
        "report": written,
        "share_rate_classifier": report.share_rate_classifier,
        "share_rate_encoder": report.share_rate_encoder,
        "variance_pearson": pearsons,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(EXIT_OK)
}

/// Sweep images, the fixed partner image and the mask used by the variance
/// diagnostic: the partner is the first validation image, the sweep the next
/// `samples` images, and the mask a CutMix rectangle of area ratio 0.5.
pub fn variance_inputs(
    val: &data::Dataset,
    samples: usize,
    rng: &mut Rng,
) -> Result<(crate::Tensor, crate::Tensor, mask::MaskPair)> {
    if val.len() < 3 {
        return Err(Error::InvalidArgument("variance sweep needs at least 3 validation images".into()));
    }
    let end = (1 + samples.max(2)).min(val.len());
    let sweep_idx: Vec<usize> = (1..end).collect();
    let sweep = val.gather(&sweep_idx, None)?;
    let fixed = val.gather(&[0], None)?;
    let (h, w) = val.image_size();
    let mask = mask::sample_cutmix_mask(h, w, 0.5, rng)?;
    Ok((sweep, fixed, mask))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let config = ExperimentConfig::load(&a.config)?;
    let mimo = config.mimo();
    mimo.validate()?;
    let check = ModelCheck {
        batch: a.batch as usize,
        samples: a.samples,
        epsilon: a.epsilon,
        seed: config.seed,
        bn_mode: BnMode::Batch,
    };
    let err = gradcheck::model_gradcheck(&mimo, check)?;
    let pass = err < GRADCHECK_TOLERANCE;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "max_relative_error": err,
            "samples": a.samples,
            "epsilon": a.epsilon,
            "tolerance": GRADCHECK_TOLERANCE,
            "pass": pass,
        }))?
    );
    Ok(if pass { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_gen_data(a: GenDataArgs) -> Result<i32> {
    let layout = a.layout.unwrap_or(if a.classes <= 10 { Layout::Cifar10 } else { Layout::Cifar100 });
    let kind = match layout {
        Layout::Cifar10 => CifarKind::Cifar10,
        Layout::Cifar100 => CifarKind::Cifar100,
    };
    if a.classes > kind.class_count() {
        return Err(Error::Config(vec![format!(
            "{} classes do not fit the {:?} layout",
            a.classes, kind
        )]));
    }
    if !(a.noise_std >= 0.0 && a.noise_std.is_finite()) {
        return Err(Error::Config(vec![format!("noise std {} must be non-negative", a.noise_std)]));
    }
    let spec = SyntheticSpec {
        class_count: a.classes,
        n_per_class: a.n_per_class,
        noise_std: a.noise_std,
    };
    let ds = data::gen_synthetic(spec, &mut SeedStreams::new(a.seed).data)
        .map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(vec![m]),
            other => other,
        })?;
    write_file(&a.output, data::encode_records(&ds, kind)?)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "output": a.output,
            "records": ds.len(),
            "classes": a.classes,
            "layout": kind,
        }))?
    );
    Ok(EXIT_OK)
}
