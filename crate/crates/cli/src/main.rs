//! `vidgen`: synthesis, training, preview, refinement, profiling and
//! inspection for the two-stage latent video pipeline.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Arg, ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::Target;
use config::{config_err, ConfigError};
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "vidgen", version, about = "Two-stage preview/refine latent video generation")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural pixel-video dataset.
    Synth,
    /// Train the base model or the refiner.
    Train {
        #[arg(value_parser = ["base", "refiner"])]
        target: String,
        /// Overwrite an existing checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Sample preview latents with the base model.
    Preview {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Upscale a preview with the refiner and dump PPM frames.
    Refine,
    /// Cost-model report.
    Profile {
        /// Also time toy runs and calibrate the time model.
        #[arg(long)]
        measure: bool,
    },
    /// Summarise an LGR1 file.
    Inspect { path: PathBuf },
    /// Re-run the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use vidgen_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidArgument(_) | E::Calibration(_) => 2,
                E::Io(_) | E::Format { .. } => 3,
                E::Shape(_) | E::ModelContract(_) => 4,
            };
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    2
}

fn replay(path: &std::path::Path, overrides: &[String]) -> Result<()> {
    let m = Manifest::read(path)?;
    let cfg = m.config(overrides)?;
    match m.get("command") {
        Some("synth") => commands::synth(&cfg).map(drop),
        Some("train") => {
            let target = Target::parse(m.get("target").unwrap_or_default())?;
            commands::train(&cfg, target, true).map(drop)
        }
        Some("preview") => commands::preview(&cfg).map(drop),
        Some("refine") => commands::refine_cmd(&cfg).map(drop),
        Some("profile") => commands::profile(&cfg, m.get("measure") == Some("true")).map(drop),
        other => Err(config_err(format!("manifest records no replayable command ({other:?})"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, &cli.set);
    }
    if let Command::Inspect { path } = &cli.command {
        return commands::inspect(path);
    }
    let mut cfg = config::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg).map(drop),
        Command::Train { target, force } => commands::train(&cfg, Target::parse(&target)?, force).map(drop),
        Command::Preview { count } => {
            if let Some(c) = count {
                cfg.preview.count = c;
            }
            commands::preview(&cfg).map(drop)
        }
        Command::Refine => commands::refine_cmd(&cfg).map(drop),
        Command::Profile { measure } => commands::profile(&cfg, measure).map(drop),
        Command::Inspect { .. } | Command::Replay { .. } => unreachable!(),
    }
}

fn parse_cli() -> Cli {
    let matches = Cli::command()
        .mut_subcommands(|sub| {
            sub.arg(
                Arg::new("sub_set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("Override a config key, e.g. `--set train.lr=1e-3`."),
            )
        })
        .get_matches();
    let mut cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    if let Some((_, sub)) = matches.subcommand() {
        cli.set.extend(sub.get_many::<String>("sub_set").into_iter().flatten().cloned());
    }
    cli
}

fn main() -> ExitCode {
    match run(parse_cli()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
