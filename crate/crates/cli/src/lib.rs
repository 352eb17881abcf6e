//! Command-line harness for the detector library: gradient checks,
//! training, evaluation, inference, the ablation lattice and synthetic data
//! generation.
//!
//! Exit codes are 0 on success, 1 when a check or validation fails and 2
//! for I/O or configuration errors.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use commands::*;
pub use config::{DataConfig, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "danet", version, about = "Deformable-attention defect detector toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        /// `all`, a module name or an op name.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = danet_core::gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
        /// Damages the named op's analytic gradient (exercises the failure path).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains and writes checkpoint.bin, loss.csv and config.json.
    Train(Common),
    /// Evaluates a checkpoint; writes eval.json and eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Detects objects in one PGM/PPM image; writes detections.json.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Trains the five-phase component lattice; writes ablation.csv.
    Ablation(Common),
    /// Writes the configured synthetic dataset as images, XML and a manifest.
    GenData(Common),
}

fn resolve(common: &Common, fallback: fn() -> RunConfig) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => fallback(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

/// Config given explicitly, or `None` so the one saved beside the
/// checkpoint is used.
fn explicit(common: &Common) -> CliResult<Option<RunConfig>> {
    match &common.config {
        None => Ok(None),
        Some(_) => Ok(Some(resolve(common, RunConfig::default)?.0)),
    }
}

/// `--out`, else the explicit config's directory, else the checkpoint's.
fn out_dir(common: &Common, cfg: &Option<RunConfig>, checkpoint: &Path) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.out_dir.clone()))
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Gradcheck {
            scope,
            seeds,
            corrupt,
            out,
        } => {
            let reports = cmd_gradcheck(Some(&scope), seeds, corrupt.as_deref(), out.as_deref())?;
            for r in &reports {
                println!("{}", r.line());
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            if failed.is_empty() {
                println!("{} checks passed", reports.len());
                Ok(0)
            } else {
                Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Train(common) => {
            let (cfg, out) = resolve(&common, RunConfig::default)?;
            let a = cmd_train(&cfg, &out, |r| {
                if r.step % 50 == 0 {
                    eprintln!("epoch {} step {} loss {:.5}", r.epoch, r.step, r.losses.total);
                }
            })?;
            println!(
                "wrote {} and {} (initial loss {:.5}, final loss {:.5})",
                a.checkpoint.display(),
                a.loss_csv.display(),
                a.outcome.initial_loss().unwrap_or(f64::NAN),
                a.outcome.final_loss().unwrap_or(f64::NAN)
            );
            Ok(0)
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = explicit(&common)?;
            let r = cmd_eval(&checkpoint, cfg.as_ref(), split, &out_dir(&common, &cfg, &checkpoint))?;
            print!("{}", r.to_csv());
            Ok(0)
        }
        Command::Infer {
            common,
            checkpoint,
            image,
        } => {
            let cfg = explicit(&common)?;
            let d = cmd_infer(&checkpoint, cfg.as_ref(), &image, &out_dir(&common, &cfg, &checkpoint))?;
            println!("{}", serde_json::to_string_pretty(&d).map_err(|e| CliError::Config(e.to_string()))?);
            Ok(0)
        }
        Command::Ablation(common) => {
            let (cfg, out) = resolve(&common, RunConfig::ablation)?;
            let (_, csv) = cmd_ablation(&cfg, &out, |m| eprintln!("{m}"))?;
            print!("{csv}");
            Ok(0)
        }
        Command::GenData(common) => {
            let (cfg, out) = resolve(&common, RunConfig::default)?;
            let n = cmd_gen_data(&cfg, &out)?;
            println!("wrote {n} images under {}", out.display());
            Ok(0)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
