mod manifest;
mod plots;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use disentangle_seg::config::{AdaptConfig, TrainConfig};
use disentangle_seg::eval::{self, EvalReport};
use disentangle_seg::losses::LossConfig;
use disentangle_seg::networks::checkpoint_id;
use disentangle_seg::seed::derive_seed;
use disentangle_seg::synth::{write_domain_dataset, DomainSpec};
use disentangle_seg::trainer::{self, EpochSummary, StepMetrics, CHECKPOINT_BEST, CHECKPOINT_FINAL};
use disentangle_seg::{load_dataset, Error, ModelBundle, Result};
use manifest::RunManifest;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

const REPORT_JSON: &str = "report.json";
const REPORT_TABLE: &str = "report.txt";
const ZERO_SHOT_JSON: &str = "zero_shot.json";
const ADAPTED_JSON: &str = "adapted.json";
const CHECKPOINT_ADAPTED: &str = "checkpoint_adapted";
const LOSS_CURVES_SVG: &str = "loss_curves.svg";
const DSC_BARS_SVG: &str = "dsc_bars.svg";

#[derive(Parser, Debug)]
#[command(name = "disentangle-seg", version)]
#[command(about = "Anatomy/appearance disentangled segmentation: synth -> train -> eval -> adapt -> report")]
#[command(after_help = "Environment:
  DISENTANGLE_SEG_THREADS  cap on augmentation worker threads
  RUST_LOG                 log filter (default: info)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic ultrasound domain as PNG image/mask pairs
    Synth {
        /// Domain appearance recipe (flat JSON object)
        #[arg(long)]
        domain_spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Side length in pixels
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all five networks on one source domain
    Train {
        /// Training config (JSON; unknown keys are rejected)
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        val_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot DSC of a checkpoint on one or more domains
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
        threshold: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on a small seeded share of a target domain, score the rest
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Training config whose `adapt` and `loss` sections are used
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `adapt.seed`
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `adapt.fraction`
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss curves and DSC bars as SVG
    Report {
        /// Training run directory holding metrics.csv and epochs.csv
        #[arg(long)]
        run_dir: PathBuf,
        /// Evaluation or adaptation report JSON files to chart
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn synth(domain_spec: &Path, n: usize, seed: u64, resolution: usize, out: &Path) -> Result<()> {
    let spec = DomainSpec::from_json(&read_text(domain_spec)?)?.clamped();
    create_dir(out)?;
    let ds = write_domain_dataset(&spec, n, seed, resolution, out)?;
    log::info!("wrote {} samples of domain {} to {}", ds.len(), spec.domain_id, out.display());

    let mut m = RunManifest::new("synth");
    m.arg("domain_spec", domain_spec.display())
        .arg("n", n)
        .arg("resolution", resolution)
        .seed("seed", seed)
        .dataset(&spec.domain_id, ds.content_hash());
    m.config = Some(serde_json::to_value(&spec)?);
    m.write(out)
}

fn train(config: &Path, train_dir: &Path, val_dir: &Path, out: &Path) -> Result<()> {
    let cfg = TrainConfig::from_json(&read_text(config)?)?;
    let train_ds = load_dataset(train_dir, cfg.resolution())?;
    let val_ds = load_dataset(val_dir, cfg.resolution())?;
    let outcome = trainer::train(&cfg, &train_ds, &val_ds, out)?;
    log::info!(
        "best val DSC {:.4} at epoch {} of {}",
        outcome.best_val_dsc,
        outcome.best_epoch,
        outcome.epochs.len()
    );

    let mut m = RunManifest::new("train");
    m.arg("config", config.display())
        .arg("train_dir", train_dir.display())
        .arg("val_dir", val_dir.display())
        .seed("seed", cfg.seed)
        .seed("init", derive_seed("init", cfg.seed, 0))
        .dataset("train", train_ds.content_hash())
        .dataset("val", val_ds.content_hash());
    for name in [CHECKPOINT_BEST, CHECKPOINT_FINAL] {
        let path = out.join(name);
        if path.is_file() {
            m.checkpoint(name, checkpoint_id(&path)?);
        }
    }
    m.config = Some(serde_json::to_value(&cfg)?);
    m.write(out)
}

fn eval_cmd(checkpoint: &Path, data_dir: &Path, threshold: f32, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidValue(format!("threshold {threshold} outside [0, 1]")));
    }
    let bundle = ModelBundle::load(checkpoint)?;
    let id = checkpoint_id(checkpoint)?;
    let ds = load_dataset(data_dir, bundle.config().resolution)?;
    let report = eval::evaluate_at(&bundle, &ds, Some(id.clone()), threshold)?;
    create_dir(out)?;
    write_text(&out.join(REPORT_JSON), &report.to_json())?;
    let table = report.to_table();
    write_text(&out.join(REPORT_TABLE), &table)?;
    print!("{table}");

    let mut m = RunManifest::new("eval");
    m.arg("checkpoint", checkpoint.display())
        .arg("data_dir", data_dir.display())
        .arg("threshold", threshold)
        .dataset("data", ds.content_hash())
        .checkpoint("input", id);
    m.write(out)
}

fn adapt_cmd(
    checkpoint: &Path,
    data_dir: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    fraction: Option<f64>,
    out: &Path,
) -> Result<()> {
    let (mut adapt_cfg, loss_cfg, resolved) = match config {
        Some(path) => {
            let cfg = TrainConfig::from_json(&read_text(path)?)?;
            (cfg.adapt.clone(), cfg.loss.clone(), Some(serde_json::to_value(&cfg)?))
        }
        None => (AdaptConfig::default(), LossConfig::default(), None),
    };
    if let Some(s) = seed {
        adapt_cfg.seed = s;
    }
    if let Some(f) = fraction {
        adapt_cfg.fraction = f;
    }
    adapt_cfg.validate()?;

    let mut bundle = ModelBundle::load(checkpoint)?;
    let id = checkpoint_id(checkpoint)?;
    let ds = load_dataset(data_dir, bundle.config().resolution)?;
    let outcome = eval::adapt(&mut bundle, &ds, &adapt_cfg, &loss_cfg, Some(id.clone()))?;

    create_dir(out)?;
    write_text(&out.join(ZERO_SHOT_JSON), &outcome.zero_shot.to_json())?;
    write_text(&out.join(ADAPTED_JSON), &outcome.adapted.to_json())?;
    let table = format!("{}\n{}", outcome.zero_shot.to_table(), outcome.adapted.to_table());
    write_text(&out.join(REPORT_TABLE), &table)?;
    print!("{table}");
    let adapted_path = out.join(CHECKPOINT_ADAPTED);
    bundle.save(&adapted_path)?;

    let mut m = RunManifest::new("adapt");
    m.arg("checkpoint", checkpoint.display())
        .arg("data_dir", data_dir.display())
        .arg("fraction", adapt_cfg.fraction)
        .arg("epochs", adapt_cfg.epochs)
        .arg("learning_rate", adapt_cfg.learning_rate)
        .arg("batch_size", adapt_cfg.batch_size)
        .seed("adapt", adapt_cfg.seed)
        .dataset("data", ds.content_hash())
        .checkpoint("input", id)
        .checkpoint(CHECKPOINT_ADAPTED, checkpoint_id(&adapted_path)?);
    m.config = resolved;
    m.write(out)
}

fn report_cmd(run_dir: &Path, evals: &[PathBuf], out: &Path) -> Result<()> {
    let steps: Vec<StepMetrics> = plots::read_csv(&run_dir.join(trainer::METRICS_CSV))?;
    let epochs: Vec<EpochSummary> = plots::read_csv(&run_dir.join(trainer::EPOCHS_CSV))?;
    create_dir(out)?;
    plots::loss_curves(&steps, &epochs, &out.join(LOSS_CURVES_SVG))?;

    let mut m = RunManifest::new("report");
    m.arg("run_dir", run_dir.display());
    if !evals.is_empty() {
        let mut reports = Vec::new();
        for (i, path) in evals.iter().enumerate() {
            let report = EvalReport::from_json(&read_text(path)?)?;
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("report{i}"));
            m.arg(&format!("eval.{i}"), path.display());
            reports.push((format!("{label}/{}", report.protocol.as_str()), report));
        }
        plots::dsc_bars(&reports, &out.join(DSC_BARS_SVG))?;
    }
    m.write(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            domain_spec,
            n,
            seed,
            resolution,
            out,
        } => synth(&domain_spec, n, seed, resolution, &out),
        Command::Train {
            config,
            train_dir,
            val_dir,
            out,
        } => train(&config, &train_dir, &val_dir, &out),
        Command::Eval {
            checkpoint,
            data_dir,
            threshold,
            out,
        } => eval_cmd(&checkpoint, &data_dir, threshold, &out),
        Command::Adapt {
            checkpoint,
            data_dir,
            config,
            seed,
            fraction,
            out,
        } => adapt_cmd(&checkpoint, &data_dir, config.as_deref(), seed, fraction, &out),
        Command::Report { run_dir, evals, out } => report_cmd(&run_dir, &evals, &out),
    }
}

fn error_line(e: &Error) -> serde_json::Value {
    let mut line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Config { key, .. } = e {
        line["key"] = serde_json::Value::String(key.clone());
    }
    line
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let message = e.kind().as_str().unwrap_or("invalid arguments");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": message }));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            let code = match e {
                Error::Config { .. } => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            };
            ExitCode::from(code)
        }
    }
}
