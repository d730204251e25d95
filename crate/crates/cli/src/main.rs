//! Command-line driver for supernet training, evaluation, and diagnostics.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use supernet_core::error::Error;

const EXIT_CODES: &str = "\
EXIT CODES:
  0  success
  2  command-line usage error
  3  configuration or validation error
  4  I/O or file-format error
  5  numeric error (non-finite values, shape mismatch)
  6  batch-norm calibration required (run eval/extract with --config, or pareto)";

#[derive(Parser)]
#[command(
    name = "supernet",
    about = "Elastic supernet training with delayed, early, and progressive shrinking",
    after_help = EXIT_CODES,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a supernet from a run config; writes checkpoints and metrics.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Calibrate and evaluate one subnet from a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        arch: ArchSelect,
        /// Calibration batches (defaults to the config's eval section).
        #[arg(long)]
        calib_batches: Option<usize>,
    },
    /// Sample, calibrate, and evaluate subnets; write the MAC-bucketed
    /// frontier to pareto.csv.
    Pareto {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of MAC buckets.
        #[arg(long)]
        buckets: Option<usize>,
        /// Number of uniformly sampled subnets.
        #[arg(long)]
        samples: Option<usize>,
        /// Evaluate every architecture of the space instead of sampling.
        #[arg(long)]
        exhaustive: bool,
        /// Output CSV path (relative paths land in the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Gradient and prediction diagnostics.
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Extract a standalone model container for one subnet.
    Extract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        arch: ArchSelect,
        /// Output container path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Shrink-train two checkpoints under identical schedules and compare
    /// the accuracy of the same sampled subnets from each initialization.
    InitCompare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint_a: PathBuf,
        #[arg(long)]
        checkpoint_b: PathBuf,
        /// Shrink-training epochs applied to each initialization.
        #[arg(long, default_value_t = 4)]
        tune_epochs: u64,
        /// Number of subnets compared.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Diagnose {
    /// Per-layer norms and cosines of the no-shrink, shrink, and
    /// eps-shrink gradients on one batch; writes gradients.csv.
    Grads {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Subnet gradient scale (defaults to the plan's epsilon0).
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run training with per-step gradient-magnitude measurement; writes
    /// trace.csv.
    Trace {
        #[arg(long)]
        config: PathBuf,
        /// Measure every N steps.
        #[arg(long, default_value_t = 1)]
        every: u64,
        /// Stop after N records (0 = unlimited).
        #[arg(long, default_value_t = 0)]
        limit: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Largest single-epoch full-model accuracy drop at or after onset.
    Onset {
        /// metrics.csv produced by train.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        onset: u64,
    },
    /// Class-correlation heatmap of a subnet's mean logits; writes
    /// heatmap.csv.
    Heatmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        arch: ArchSelect,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

/// One subnet, selected by digest, JSON stanza, or the space extremes.
#[derive(clap::Args)]
#[group(required = true, multiple = false)]
struct ArchSelect {
    /// Canonical config digest, e.g. "d=2,2;w=1,1|1,1;k=5,5|5,5;r=16".
    #[arg(long)]
    config_digest: Option<String>,
    /// JSON stanza: {"depth":[..],"width_frac":[[..]],"kernel":[[..]],"resolution":N}.
    #[arg(long)]
    arch: Option<String>,
    /// The largest architecture.
    #[arg(long)]
    full: bool,
    /// The smallest architecture.
    #[arg(long)]
    min: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::Contract(_) => 3,
        Error::Io(_) | Error::Format { .. } => 4,
        Error::NonFinite { .. } | Error::ShapeMismatch { .. } => 5,
        Error::CalibrationRequired { .. } => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, output_dir } => commands::train(&config, output_dir.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            arch,
            calib_batches,
        } => commands::eval(&config, &checkpoint, &arch, calib_batches),
        Command::Pareto {
            config,
            checkpoint,
            buckets,
            samples,
            exhaustive,
            out,
            output_dir,
        } => commands::pareto(
            &config,
            &checkpoint,
            buckets,
            samples,
            exhaustive,
            out.as_deref(),
            output_dir.as_deref(),
        ),
        Command::Diagnose(d) => match d {
            Diagnose::Grads {
                config,
                checkpoint,
                epsilon,
                k,
                out,
                output_dir,
            } => commands::diagnose_grads(
                &config,
                &checkpoint,
                epsilon,
                k,
                out.as_deref(),
                output_dir.as_deref(),
            ),
            Diagnose::Trace {
                config,
                every,
                limit,
                out,
                output_dir,
            } => commands::diagnose_trace(&config, every, limit, out.as_deref(), output_dir.as_deref()),
            Diagnose::Onset { metrics, onset } => commands::diagnose_onset(&metrics, onset),
            Diagnose::Heatmap {
                config,
                checkpoint,
                arch,
                out,
                output_dir,
            } => commands::diagnose_heatmap(
                &config,
                &checkpoint,
                &arch,
                out.as_deref(),
                output_dir.as_deref(),
            ),
        },
        Command::Extract {
            config,
            checkpoint,
            arch,
            out,
            output_dir,
        } => commands::extract(
            &config,
            &checkpoint,
            &arch,
            out.as_deref(),
            output_dir.as_deref(),
        ),
        Command::InitCompare {
            config,
            checkpoint_a,
            checkpoint_b,
            tune_epochs,
            samples,
            out,
            output_dir,
        } => commands::init_compare(
            &config,
            &checkpoint_a,
            &checkpoint_b,
            tune_epochs,
            samples,
            out.as_deref(),
            output_dir.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

impl ArchSelect {
    fn resolve(
        &self,
        space: &supernet_core::arch::ArchSpace,
    ) -> supernet_core::error::Result<supernet_core::arch::ArchConfig> {
        let config = if self.full {
            space.a_full()
        } else if self.min {
            space.a_min()
        } else if let Some(d) = &self.config_digest {
            d.parse()?
        } else if let Some(json) = &self.arch {
            serde_json::from_str(json)
                .map_err(|e| Error::Validation(format!("bad --arch stanza: {e}")))?
        } else {
            return Err(Error::Validation("no architecture selected".into()));
        };
        space.validate_config(&config)?;
        Ok(config)
    }
}
