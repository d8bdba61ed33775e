//! `relbal`: generate synthetic embedding data, train and evaluate the
//! reliability-balancing head, run ablation sweeps and audit gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "relbal", version, about = "Reliability-balancing classification head toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset pair and its manifest.
    Gen(Common),
    /// Train a head and write its checkpoints, log and metrics.
    Train(Common),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also write every prediction record as JSON lines.
        #[arg(long)]
        dump_records: bool,
    },
    /// Retrain from scratch for every value (and seed) of one ablation axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// anchors, noise, smoothing or lambda-a.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values; defaults to the standard ablation grid.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1")]
        seeds: String,
        /// Comma-separated anchor counts crossed with the noise axis.
        #[arg(long, default_value = "0,8")]
        noise_anchors: String,
        /// Worker threads for concurrent cells (0 = all cores).
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Check analytic gradients against central finite differences.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Number of random instances.
        #[arg(long, default_value_t = 20)]
        instances: u64,
        /// Samples per instance.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

macro_rules! overrides {
    ($($field:ident),* $(,)?) => {
        /// Options shared by every command; each mirrors a config-file key.
        #[derive(Args)]
        struct Common {
            /// Flat `key = value` config file; flags override its values.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl Common {
            fn resolve(&self) -> relbal_core::Result<RunConfig> {
                let mut cfg = RunConfig::default();
                if let Some(path) = &self.config {
                    cfg.apply_file(path)?;
                }
                $(
                    if let Some(v) = &self.$field {
                        cfg.set(&stringify!($field).replace('_', "-"), v)?;
                    }
                )*
                Ok(cfg)
            }
        }
    };
}

overrides!(
    classes,
    dim,
    per_class,
    spread,
    separation,
    data_seed,
    train_per_class,
    format,
    noise,
    epochs,
    lr,
    decay,
    batch_size,
    lambda_cls,
    lambda_a,
    lambda_c,
    smoothing,
    refine_per_group,
    refine_per_class,
    anchors,
    temperature,
    tokens,
    heads,
    hidden,
    dropout,
    reduction,
    head_dim,
    seed,
    eval_every,
    grad_clip,
    data,
    train_data,
    test_data,
    checkpoint,
    out,
);

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(c) => commands::gen(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Eval { common, dump_records } => commands::eval(&common.resolve()?, dump_records),
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
            noise_anchors,
            threads,
        } => {
            let opts = commands::SweepOptions {
                axis: axis.parse()?,
                values: values.as_deref().map(commands::parse_list).transpose()?,
                seeds: commands::parse_list(&seeds)?,
                noise_anchors: commands::parse_list(&noise_anchors)?,
                threads,
            };
            commands::sweep(&common.resolve()?, &opts)
        }
        Command::Audit {
            common,
            instances,
            batch,
            step,
            tolerance,
        } => commands::audit(&common.resolve()?, instances, batch, step, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.kind().to_string();
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or(&text)
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
