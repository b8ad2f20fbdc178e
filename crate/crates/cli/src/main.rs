//! `divmotion`: synthesize data, train the pose prior and generator, sample,
//! evaluate and export, all inside one run directory.

mod commands;
mod config;
mod export;
mod manifest;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::commands::{EvalMethod, RunContext, SampleArgs};
use crate::config::RunConfig;
use crate::export::{Format, View};
use crate::manifest::Recorder;
use crate::workspace::Workspace;

#[derive(Parser)]
#[command(
    name = "divmotion",
    version,
    about = "Diverse, part-controllable human motion prediction"
)]
struct Cli {
    /// Run config (TOML): training settings plus optional [synth], [prior],
    /// [angles] and [eval] tables. Defaults to the desk-synth preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural train/val/test motion splits.
    Synth,
    /// Fit the normalizing-flow pose prior on training limb directions.
    TrainPrior,
    /// Mine joint-angle ranges from the training poses.
    MineAngles,
    /// Train the part-sequential generator against the frozen prior and angle table.
    Train {
        /// Model name; artifacts go to `<out>/models/<name>`.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Draw future motions for one observed past.
    Sample {
        #[arg(long, default_value = "model")]
        model: String,
        /// Output directory name under `<out>/samples`; defaults to the model name.
        #[arg(long)]
        name: Option<String>,
        /// Motion file holding the past; defaults to the first test sequence.
        #[arg(long)]
        input: Option<PathBuf>,
        /// First observed frame of the input.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Samples per part; defaults to the config's `k`.
        #[arg(short, long)]
        k: Option<usize>,
        /// Draw K paths sharing the latents of the first Jc parts instead of a full tree.
        #[arg(long, value_name = "JC")]
        freeze_parts: Option<usize>,
        /// `latents.json` of an earlier sample run supplying the frozen latents.
        #[arg(long)]
        latents: Option<PathBuf>,
        /// Which path of the latents file to freeze.
        #[arg(long, default_value_t = 0)]
        path: usize,
    },
    /// Score a model, the zero-velocity baseline or a prediction dump on the test split.
    Eval {
        #[arg(long, default_value = "model")]
        model: String,
        #[arg(long, value_enum, default_value_t = Method::Model)]
        method: Method,
        /// Score this prediction dump instead of sampling.
        #[arg(long, conflicts_with = "method")]
        predictions: Option<PathBuf>,
        /// Also write the scored samples as a prediction dump.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Samples per test window; defaults to the config's [eval] samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Convert a sample directory into CSV, JSON or SVG frames.
    Export {
        /// Sample directory written by `divmotion sample`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// Orthographic view axis for SVG frames.
        #[arg(long, value_enum, default_value_t = View::Z)]
        view: View,
        /// Destination directory; defaults to `<input>/export-<format>`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Model,
    ZeroVelocity,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    let ctx = RunContext {
        ws: Workspace::new(&cli.out),
        cfg,
        config_path: cli.config.clone(),
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::TrainPrior => commands::train_prior_cmd(&ctx),
        Command::MineAngles => commands::mine_angles(&ctx),
        Command::Train { name } => commands::train_cmd(&ctx, &name),
        Command::Sample {
            model,
            name,
            input,
            start,
            k,
            freeze_parts,
            latents,
            path,
        } => commands::sample(
            &ctx,
            &SampleArgs {
                model,
                name,
                input,
                start,
                k,
                freeze_parts,
                latents,
                path,
            },
        ),
        Command::Eval {
            model,
            method,
            predictions,
            dump,
            samples,
        } => {
            let mut ctx = ctx;
            if let Some(s) = samples {
                ctx.cfg.eval.samples = s;
            }
            let method = match (predictions, method) {
                (Some(p), _) => EvalMethod::Predictions(p),
                (None, Method::ZeroVelocity) => EvalMethod::ZeroVelocity,
                (None, Method::Model) => EvalMethod::Model(model),
            };
            commands::eval(&ctx, &method, dump.as_deref())
        }
        Command::Export {
            input,
            format,
            view,
            dest,
        } => {
            let label = format!("{format:?}").to_lowercase();
            let dest = dest.unwrap_or_else(|| input.join(format!("export-{label}")));
            let mut rec =
                Recorder::new("export", ctx.config_path.as_deref(), ctx.cfg.to_toml()?, 0);
            let written = export::export(&input, &dest, format, view)?;
            for entry in std::fs::read_dir(&input)? {
                let p = entry?.path();
                if commands::is_sample_file(&p) {
                    rec.input(p);
                }
            }
            for p in &written {
                rec.output(p);
            }
            rec.finish(
                &dest.join("manifest.json"),
                json!({"format": label, "files": written.len()}),
            )?;
            println!(
                "wrote {} {label} file(s) to {}",
                written.len(),
                dest.display()
            );
            Ok(())
        }
    }
}
