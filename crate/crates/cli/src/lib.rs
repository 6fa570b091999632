//! `embedhead` command line: synthetic data, preparation, training,
//! evaluation, prediction and gradient checks, driven by one JSON config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{ConfigArgs, FoldSelection, Slice};
use config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "embedhead", version, about = "Classifier heads over precomputed image embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigFlags {
    /// Run config (JSON). Defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.epochs=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl From<ConfigFlags> for ConfigArgs {
    fn from(f: ConfigFlags) -> Self {
        ConfigArgs {
            config: f.config,
            overrides: f.overrides,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SliceArg {
    Heldout,
    Val,
    Train,
    Pool,
}

impl From<SliceArg> for Slice {
    fn from(s: SliceArg) -> Self {
        match s {
            SliceArg::Heldout => Slice::Heldout,
            SliceArg::Val => Slice::Val,
            SliceArg::Train => Slice::Train,
            SliceArg::Pool => Slice::Pool,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split the validation pool and write catalog, split and metadata schema.
    Prepare {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset (EMB1 + CSV + manifest).
    Synth {
        /// Synthetic-data parameters (JSON).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one or both folds and keep the best checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigFlags,
        /// Output directory of `prepare`.
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fold index or `all`.
        #[arg(long, default_value = "all")]
        fold: FoldSelection,
    },
    /// Score checkpoints (logit-averaged when several) on a data slice.
    Evaluate {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        prepared: PathBuf,
        /// Overrides the config's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "heldout")]
        slice: SliceArg,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Pool name for `--slice pool`.
        #[arg(long, default_value = "val")]
        pool: String,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-class CSV path.
        #[arg(long)]
        per_class: Option<PathBuf>,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Write per-record predictions for a manifest pool.
    Predict {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        pool: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Finite-difference check of every op, head and loss.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = embedhead::diagnostics::GRADCHECK_TOL)]
        tolerance: f64,
        /// Include a fixture with a wrong backward rule (harness sanity).
        #[arg(long, hide = true)]
        include_corrupted: bool,
    },
}

/// Exit code for an error: configuration problems are 2, the rest 1.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let usage = e.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(
                c.downcast_ref::<embedhead::Error>(),
                Some(embedhead::Error::InvalidArgument { .. } | embedhead::Error::Incompatible { .. })
            )
    });
    if usage {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<i32> {
    match cmd {
        Command::Synth { params, overrides, out: dir } => {
            let manifest = commands::cmd_synth(&commands::SynthArgs { params, overrides, out: dir })?;
            writeln!(out, "wrote {}", manifest.display())?;
        }
        Command::Prepare { config, out: dir } => {
            let p = commands::cmd_prepare(&commands::PrepareArgs {
                config: config.into(),
                out: dir,
            })?;
            let [a, b, c] = p.section_sizes;
            writeln!(out, "sections {a} {b} {c}; {} classes; metadata width {}", p.n_classes, p.schema_width)?;
        }
        Command::Train {
            config,
            prepared,
            out: dir,
            fold,
        } => {
            let folds = commands::cmd_train(&commands::TrainArgs {
                config: config.into(),
                prepared,
                out: dir,
                fold,
            })?;
            for f in folds {
                let last = f.history.last().expect("at least one epoch");
                writeln!(
                    out,
                    "fold {}: {} epochs, final top1 {:.4}, best epochs {:?}",
                    f.fold,
                    f.history.len(),
                    last.top1,
                    f.best_epochs
                )?;
                for c in &f.checkpoints {
                    writeln!(out, "  {}", c.display())?;
                }
            }
        }
        Command::Evaluate {
            config,
            prepared,
            manifest,
            slice,
            fold,
            pool,
            out: path,
            per_class,
            checkpoints,
        } => {
            let r = commands::cmd_evaluate(&commands::EvaluateArgs {
                config: config.into(),
                prepared,
                manifest,
                slice: slice.into(),
                fold,
                pool,
                checkpoints,
                out: path,
                per_class,
            })?;
            let s = &r.report;
            writeln!(
                out,
                "{} models on {} ({} samples): accuracy {:.4} track1 {:.4} track2 {:.4} track3 {:.4}",
                r.n_models, r.slice, s.n_samples, s.accuracy, s.track1, s.track2, s.track3
            )?;
        }
        Command::Predict {
            config,
            prepared,
            manifest,
            pool,
            out: path,
            checkpoints,
        } => {
            let p = commands::cmd_predict(&commands::PredictArgs {
                config: config.into(),
                prepared,
                manifest,
                pool,
                checkpoints,
                out: path,
            })?;
            writeln!(
                err,
                "inference: {} images in {:.3} s, {:.6} s per image",
                p.rows,
                p.seconds,
                p.seconds_per_image()
            )?;
        }
        Command::Gradcheck {
            seeds,
            tolerance,
            include_corrupted,
        } => {
            let checks = commands::cmd_gradcheck(&commands::GradcheckArgs {
                seeds,
                tolerance,
                include_corrupted,
            })?;
            let mut failed = 0;
            for c in &checks {
                let ok = c.passed(tolerance);
                failed += usize::from(!ok);
                writeln!(
                    out,
                    "{:<24} {:>12.3e} {:>6} {}",
                    c.component,
                    c.max_rel_error,
                    c.coords,
                    if ok { "ok" } else { "FAIL" }
                )?;
            }
            writeln!(out, "{} components, {failed} failed (tolerance {tolerance:e}, {seeds} seeds)", checks.len())?;
            if failed > 0 {
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}
