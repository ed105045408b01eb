//! Command-line front end for the open-set recognition lifecycle.
//!
//! Every subcommand reads the same layered configuration: built-in
//! defaults, then an optional `--config` file of `key=value` lines, then
//! `--seed` derivations, then repeatable `--set KEY=VALUE` overrides.
//! Convenience flags on individual subcommands are sugar for `--set`.
//! All randomness flows from seeds in that config, so any artifact can be
//! regenerated byte-for-byte from the config block it embeds.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use openset_core::eval::ReportFormat;

use crate::commands::EvalArgs;
use crate::config::ResolvedConfig;

// ---------------------------------------------------------------------------

/// Errors split by who has to act on them: `Usage` means the invocation or
/// configuration is wrong (exit code 2), `Data` means inputs or processing
/// failed (exit code 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Data(err) => write!(f, "{err:#}"),
        }
    }
}

impl From<openset_core::Error> for CliError {
    fn from(err: openset_core::Error) -> Self {
        match err {
            openset_core::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Data(anyhow::Error::new(other)),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "openset",
    version,
    about = "Open-set recognition lifecycle: detect unknowns, label, expand, fine-tune"
)]
struct Cli {
    /// Config file of key=value lines, applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed: sets data.seed and derives split/train/compare seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one config key (repeatable), e.g. --set train.epochs=60.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output format for reports: csv or json.
    #[arg(long, global = true, default_value = "csv")]
    format: String,

    /// Suppress progress lines on stdout.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-blob dataset as CSV.
    Synth {
        /// Number of categories.
        #[arg(long)]
        classes: Option<usize>,
        /// Samples per category.
        #[arg(long = "per-class")]
        per_class: Option<usize>,
        /// Feature dimensionality.
        #[arg(long)]
        dim: Option<usize>,
        /// Within-category standard deviation.
        #[arg(long)]
        spread: Option<f64>,
        /// Distance between category centers.
        #[arg(long)]
        separation: Option<f64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into known train/test sets and an unknown pool.
    Split {
        /// Input CSV (defaults to the configured synthetic source).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of categories treated as known.
        #[arg(long)]
        known: Option<usize>,
        /// Categories held out as unknown: a count or `all`.
        #[arg(long)]
        unknowns: Option<String>,
        /// Fraction of each known category used for training.
        #[arg(long = "train-frac")]
        train_frac: Option<f64>,
        /// Output directory for train/test/pool CSVs and split.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the initial closed-set classifier on a labeled CSV.
    Train {
        /// Training CSV with labels 1..=N.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long)]
        l2: Option<f64>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-category detection thresholds from a trained model.
    Calibrate {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Calibration CSV, normally the training split.
        #[arg(long)]
        data: PathBuf,
        /// Floor factor on the acceptance threshold.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Scale on the top-two margin threshold.
        #[arg(long)]
        rho: Option<f64>,
        /// Calibrate on softmax probabilities instead of raw activations.
        #[arg(long = "softmax-confidence")]
        softmax_confidence: bool,
        /// Thresholds output path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full open-world session and write its artifacts.
    Run {
        /// Number of categories treated as known.
        #[arg(long)]
        known: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        /// Lifetime teacher annotations per category.
        #[arg(long)]
        budget: Option<usize>,
        /// Initialize new columns with the plain column mean.
        #[arg(long = "no-emphasis")]
        no_emphasis: bool,
        /// Fine-tune all columns at the full learning rate.
        #[arg(long = "no-allometry")]
        no_allometry: bool,
        /// Output directory for session.json, iterations.csv, per_category.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint, closed-set or open-set, from files.
    Eval {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Closed-set mode: argmax accuracy on --test.
        #[arg(long)]
        closed: bool,
        /// Test CSV for closed-set evaluation.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Thresholds JSON for open-set evaluation.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Known-category test CSV.
        #[arg(long = "known-test")]
        known_test: Option<PathBuf>,
        /// Unknown-category test CSV.
        #[arg(long = "unknown-test")]
        unknown_test: Option<PathBuf>,
        /// Comma-separated truth=assigned pairs for incorporated categories.
        #[arg(long)]
        incorporated: Option<String>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one session per openness level and tabulate final accuracy.
    Sweep {
        /// Comma-separated unknown-category counts, e.g. 1,2,5,10.
        #[arg(long)]
        unknowns: Option<String>,
        /// Number of categories treated as known.
        #[arg(long)]
        known: Option<usize>,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare mean-column and stochastic new-column initialization.
    Compare {
        /// Number of paired seeds to average over.
        #[arg(long)]
        seeds: Option<usize>,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Toggle emphasis and damped fine-tuning over replayed sessions.
    Ablate {
        /// Number of seeds to average over.
        #[arg(long)]
        seeds: Option<usize>,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------

/// Copies a subcommand's convenience flags into the config map so the
/// embedded echo reflects exactly what ran.
fn apply_overrides(cfg: &mut ResolvedConfig, command: &Command) -> Result<(), CliError> {
    fn put<T: ToString>(
        cfg: &mut ResolvedConfig,
        key: &str,
        value: &Option<T>,
    ) -> Result<(), CliError> {
        if let Some(v) = value {
            cfg.set(key, v.to_string())?;
        }
        Ok(())
    }

    match command {
        Command::Synth {
            classes,
            per_class,
            dim,
            spread,
            separation,
            ..
        } => {
            put(cfg, "synth.classes", classes)?;
            put(cfg, "synth.per_class", per_class)?;
            put(cfg, "synth.dim", dim)?;
            put(cfg, "synth.spread", spread)?;
            put(cfg, "synth.separation", separation)?;
        }
        Command::Split {
            data,
            known,
            unknowns,
            train_frac,
            ..
        } => {
            if let Some(path) = data {
                cfg.set("data.source", "csv")?;
                cfg.set("data.path", path.display().to_string())?;
            }
            put(cfg, "split.n_known", known)?;
            put(cfg, "split.n_unknown", unknowns)?;
            put(cfg, "split.train_frac", train_frac)?;
        }
        Command::Train {
            lr,
            epochs,
            batch_size,
            l2,
            ..
        } => {
            put(cfg, "train.learning_rate", lr)?;
            put(cfg, "train.epochs", epochs)?;
            put(cfg, "train.batch_size", batch_size)?;
            put(cfg, "train.l2", l2)?;
        }
        Command::Calibrate {
            epsilon,
            rho,
            softmax_confidence,
            ..
        } => {
            put(cfg, "thresholds.epsilon", epsilon)?;
            put(cfg, "thresholds.rho", rho)?;
            if *softmax_confidence {
                cfg.set("thresholds.confidence", "softmax")?;
            }
        }
        Command::Run {
            known,
            epsilon,
            rho,
            budget,
            no_emphasis,
            no_allometry,
            ..
        } => {
            put(cfg, "split.n_known", known)?;
            put(cfg, "thresholds.epsilon", epsilon)?;
            put(cfg, "thresholds.rho", rho)?;
            put(cfg, "session.teacher_budget", budget)?;
            if *no_emphasis {
                cfg.set("expand.emphasis", "false")?;
            }
            if *no_allometry {
                cfg.set("session.allometry", "false")?;
            }
        }
        Command::Sweep { unknowns, known, .. } => {
            put(cfg, "sweep.unknown_counts", unknowns)?;
            put(cfg, "split.n_known", known)?;
        }
        Command::Compare { seeds, .. } | Command::Ablate { seeds, .. } => {
            put(cfg, "compare.seeds", seeds)?;
        }
        Command::Eval { .. } => {}
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = ResolvedConfig::resolve(cli.config.as_deref(), cli.seed, &cli.sets)?;
    apply_overrides(&mut cfg, &cli.command)?;
    let format: ReportFormat = cli.format.parse()?;
    let quiet = cli.quiet;

    match &cli.command {
        Command::Synth { out, .. } => commands::cmd_synth(&cfg, out, quiet),
        Command::Split { out, .. } => commands::cmd_split(&cfg, out, quiet),
        Command::Train { data, out, .. } => commands::cmd_train(&cfg, data, out, quiet),
        Command::Calibrate {
            model, data, out, ..
        } => commands::cmd_calibrate(&cfg, model, data, out, quiet),
        Command::Run { out, .. } => commands::cmd_run(&cfg, out, quiet),
        Command::Eval {
            model,
            closed,
            test,
            thresholds,
            known_test,
            unknown_test,
            incorporated,
            out,
        } => commands::cmd_eval(
            &cfg,
            &EvalArgs {
                model,
                closed: *closed,
                test: test.as_deref(),
                thresholds: thresholds.as_deref(),
                known_test: known_test.as_deref(),
                unknown_test: unknown_test.as_deref(),
                incorporated: incorporated.as_deref(),
                out: out.as_deref(),
            },
            format,
            quiet,
        ),
        Command::Sweep { out, .. } => commands::cmd_sweep(&cfg, out, format, quiet),
        Command::Compare { out, .. } => commands::cmd_compare(&cfg, out, format, quiet),
        Command::Ablate { out, .. } => commands::cmd_ablate(&cfg, out, format, quiet),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
