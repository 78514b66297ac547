//! Command-line front end for the temviro pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use temviro_core::imageio::{self, Split};
use temviro_core::model::{ArchConfig, FusionMode};
use temviro_core::nn::gradcheck;
use temviro_core::nn::optim::OptimizerKind;
use temviro_core::preprocess::PreprocessOptions;
use temviro_core::trainer::{self, synth, Precision, PreprocessTarget, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "temviro",
    version,
    about = "Two-branch convolutional texture classifier: preprocessing, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-image filtered/transformed feature maps as .tvfm files
    Preprocess(PreprocessArgs),
    /// Scan a directory tree into a manifest CSV with a stratified split
    BuildManifest(BuildManifestArgs),
    /// Train a model from a split manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest
    Evaluate(EvaluateArgs),
    /// Classify a single image with a trained checkpoint
    Predict(PredictArgs),
    /// Export per-epoch metric curves from a history file as CSV
    ExportCurves(ExportCurvesArgs),
    /// Generate the synthetic grating dataset
    Synth(SynthArgs),
    /// Verify every layer's gradients against central differences
    Gradcheck,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory scanned recursively for PGM/PNG/TIFF images
    #[arg(long)]
    input_dir: PathBuf,
    /// Output directory for the .tvfm files
    #[arg(long)]
    out: PathBuf,
    /// Which maps to write: stdfilt, dct, or both
    #[arg(long, default_value = "both")]
    mode: String,
    /// Resize target (square)
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Standard-deviation filter window (odd, >= 3)
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Apply the signed-log transform to DCT coefficients
    #[arg(long, default_value_t = false)]
    dct_log: bool,
}

#[derive(Args)]
struct BuildManifestArgs {
    /// Dataset root: one subdirectory per class
    #[arg(long)]
    root: PathBuf,
    /// Expected number of class subdirectories
    #[arg(long, default_value_t = 14)]
    expected_classes: usize,
    /// Fraction of each class assigned to the train split
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    /// Split shuffle seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV with train/test split assignments
    #[arg(long)]
    manifest: PathBuf,
    /// Architecture config file (defaults to the built-in architecture)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// fused, branch1, or branch2
    #[arg(long, default_value = "fused")]
    mode: String,
    /// Output directory for checkpoints, history, and the cache
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// adam or sgd
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// Numeric precision (f64)
    #[arg(long, default_value = "f64")]
    precision: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Report path; `.csv` and `.confusion.csv` variants are written alongside
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct ExportCurvesArgs {
    #[arg(long)]
    history: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
}

enum CliError {
    Usage(String),
    Run(TrainError),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Run(e)
    }
}

fn main() -> ExitCode {
    temviro_core::threads::init_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; exit 1 marks a usage error.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(err)) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            let code = match &err {
                TrainError::NumericFailure(_) => 3,
                TrainError::Nn(temviro_core::nn::NnError::NonFinite(_)) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Preprocess(args) => {
            let target = PreprocessTarget::parse(&args.mode).ok_or_else(|| {
                CliError::Usage(format!("unknown preprocess mode `{}`", args.mode))
            })?;
            let opts = PreprocessOptions {
                target_size: args.size,
                window_size: args.window,
                dct_log: args.dct_log,
            };
            let count = trainer::preprocess_directory(&args.input_dir, &args.out, target, &opts)?;
            println!(
                "wrote feature maps for {count} images to {}",
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::BuildManifest(args) => {
            if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
                return Err(CliError::Usage(
                    "train fraction must be strictly between 0 and 1".into(),
                ));
            }
            let manifest = imageio::build_manifest(&args.root, args.expected_classes)
                .map_err(TrainError::from)?;
            let split = imageio::split_stratified(&manifest, args.train_fraction, args.seed);
            imageio::write_manifest(&split, &args.out).map_err(TrainError::from)?;
            let train = split
                .records
                .iter()
                .filter(|r| r.split == Split::Train)
                .count();
            println!(
                "{} records ({} train / {} test) across {} classes -> {}",
                split.records.len(),
                train,
                split.records.len() - train,
                split.class_names.len(),
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let manifest = imageio::read_manifest(&args.manifest).map_err(TrainError::from)?;
            let mode = FusionMode::parse(&args.mode)
                .ok_or_else(|| CliError::Usage(format!("unknown mode `{}`", args.mode)))?;
            let mut arch = match &args.config {
                Some(path) => ArchConfig::load(path).map_err(TrainError::from)?,
                None => ArchConfig::with_classes(manifest.class_names.len()),
            };
            arch.mode = mode;
            let optimizer = OptimizerKind::parse(&args.optimizer).ok_or_else(|| {
                CliError::Usage(format!("unknown optimizer `{}`", args.optimizer))
            })?;
            let precision = Precision::parse(&args.precision).ok_or_else(|| {
                CliError::Usage(format!("unsupported precision `{}`", args.precision))
            })?;
            let mut cfg = TrainConfig::new(arch);
            cfg.epochs = args.epochs;
            cfg.batch_size = args.batch_size;
            cfg.optimizer = optimizer;
            cfg.learning_rate = args.learning_rate;
            cfg.seed = args.seed;
            cfg.precision = precision;
            let outcome = trainer::train(&cfg, &manifest, &args.out_dir)?;
            let best = outcome.history.best_record().expect("at least one epoch");
            println!(
                "trained {} epochs (mode {}, seed {}, batch {}, {} lr {}, precision {})",
                cfg.epochs,
                args.mode,
                cfg.seed,
                cfg.batch_size,
                cfg.optimizer.name(),
                cfg.learning_rate,
                cfg.precision.name()
            );
            println!(
                "best epoch {}: test accuracy {:.2}% | last epoch: test accuracy {:.2}%",
                outcome.history.best_epoch,
                best.test.accuracy * 100.0,
                outcome.history.records.last().unwrap().test.accuracy * 100.0
            );
            println!(
                "checkpoints: {} (best), {} (last); history: {}",
                outcome.best_checkpoint.display(),
                outcome.last_checkpoint.display(),
                outcome.history_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate(args) => {
            let split = Split::parse(&args.split)
                .ok_or_else(|| CliError::Usage(format!("unknown split `{}`", args.split)))?;
            let checkpoint = trainer::open_checkpoint(&args.checkpoint)?;
            let manifest = imageio::read_manifest(&args.manifest).map_err(TrainError::from)?;
            let (report, cm) = trainer::evaluate(&checkpoint, &manifest, split, None)?;
            std::fs::write(&args.report, report.to_text()).map_err(|e| TrainError::Io {
                path: args.report.clone(),
                source: e,
            })?;
            let csv_path = args.report.with_extension("csv");
            std::fs::write(&csv_path, report.to_csv()).map_err(|e| TrainError::Io {
                path: csv_path.clone(),
                source: e,
            })?;
            let cm_path = args.report.with_extension("confusion.csv");
            std::fs::write(&cm_path, cm.to_csv()).map_err(|e| TrainError::Io {
                path: cm_path.clone(),
                source: e,
            })?;
            println!(
                "split {} | accuracy {:.2}% | macro P {:.2}% R {:.2}% F1 {:.2}% | QWK {:.4} | loss {:.4} | KLD {:.4}",
                args.split,
                report.accuracy * 100.0,
                report.macro_precision * 100.0,
                report.macro_recall * 100.0,
                report.macro_f1 * 100.0,
                report.qwk,
                report.loss,
                report.kld
            );
            println!("report: {} (+ .csv, .confusion.csv)", args.report.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict(args) => {
            let checkpoint = trainer::open_checkpoint(&args.checkpoint)?;
            let (name, probs) = trainer::predict(&checkpoint, &args.image)?;
            println!("predicted class: {name}");
            for (class, p) in checkpoint.meta.class_names.iter().zip(&probs) {
                println!("  {class}: {:.2}%", p * 100.0);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportCurves(args) => {
            let history = trainer::TrainingHistory::load(&args.history)?;
            trainer::export_curves(&history, &args.out_dir)?;
            println!(
                "wrote {} curve files to {}",
                trainer::history::CURVE_FAMILIES.len(),
                args.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth(args) => {
            if args.classes < 2 {
                return Err(CliError::Usage("need at least two classes".into()));
            }
            let opts = synth::SynthOptions {
                classes: args.classes,
                train_per_class: args.train_per_class,
                test_per_class: args.test_per_class,
                size: args.size,
                seed: args.seed,
            };
            let manifest = synth::generate(&args.out, &opts)?;
            println!(
                "generated {} images ({} train / {} test) in {}",
                manifest.records.len(),
                args.classes * args.train_per_class,
                args.classes * args.test_per_class,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let checks = gradcheck::run_all(&gradcheck::default_seeds());
            let mut ok = true;
            for check in &checks {
                println!(
                    "layer {:<22} max relative error {:>10.3e}  [{}]",
                    check.layer,
                    check.max_rel_error,
                    if check.passed { "ok" } else { "FAIL" }
                );
                ok &= check.passed;
            }
            if ok {
                println!("all {} layer checks passed", checks.len());
                Ok(ExitCode::SUCCESS)
            } else {
                let first = checks.iter().find(|c| !c.passed).expect("a failure exists");
                eprintln!(
                    "gradient check failed for layer {} (max relative error {:.3e})",
                    first.layer, first.max_rel_error
                );
                Ok(ExitCode::from(3))
            }
        }
    }
}
