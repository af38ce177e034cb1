use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use asxai::config::{resolve_out_dir, RunConfig};
use asxai::percept_study::Domain;
use asxai::{checkpoint, pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "asxai", version, about = "Concept-basis prototype CNN: training, analysis and explanations")]
struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $ASXAI_OUT, then ./asxai_out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train, project and fit concept distributions; writes a checkpoint.
    Train(Common),
    /// Re-project the basis vectors of a checkpoint onto training patches.
    Project(WithCheckpoint),
    /// Per-image feature-map rank profiles and concept sensitivity scores.
    Rank(WithCheckpoint),
    /// Row-centered PCA common traits per concept.
    Traits(WithCheckpoint),
    /// Invert common traits to images; optional salient-region overlays.
    Visualize {
        #[command(flatten)]
        args: WithCheckpoint,
        /// Image whose salient regions are overlaid.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Overrides inversion.iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Explain one image.
    Explain {
        #[command(flatten)]
        args: WithCheckpoint,
        #[arg(long)]
        image: PathBuf,
    },
    /// Sensitivity of concept masks to perceptual perturbations.
    PerceptStudy {
        #[command(flatten)]
        args: WithCheckpoint,
        /// Comma-separated subset of hue,brightness,contrast,saturation,texture,shape.
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<String>>,
        /// Overrides percept.samples_per_category.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Summarize an output directory into summary.json.
    Report(Common),
    /// Check that every artifact in a directory comes from one config.
    Verify {
        dir: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    status: &'static str,
    kind: &'a str,
    message: String,
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&common.config)?;
    Ok((cfg, resolve_out_dir(common.out.as_deref())))
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            emit(&pipeline::run_train(&cfg, &out)?)?;
        }
        Command::Project(a) => {
            let (cfg, _) = load(&a.common)?;
            let n = pipeline::run_project(&cfg, &a.checkpoint)?;
            emit(&serde_json::json!({ "projected": n }))?;
        }
        Command::Rank(a) => {
            let (cfg, out) = load(&a.common)?;
            emit(&pipeline::run_rank(&cfg, &a.checkpoint, &out)?.mean_scores)?;
        }
        Command::Traits(a) => {
            let (cfg, out) = load(&a.common)?;
            let index = pipeline::run_traits(&cfg, &a.checkpoint, &out)?;
            let ks: std::collections::BTreeMap<_, _> = index.iter().map(|(c, s)| (c.clone(), s.eigenvalues.len())).collect();
            emit(&ks)?;
        }
        Command::Visualize { args, image, iterations } => {
            let (cfg, out) = load(&args.common)?;
            let mut inversion = cfg.inversion.clone();
            if let Some(n) = iterations {
                inversion.iterations = n;
            }
            emit(&pipeline::run_visualize(&cfg, &args.checkpoint, &out, &inversion, image.as_deref())?)?;
        }
        Command::Explain { args, image } => {
            let (cfg, out) = load(&args.common)?;
            let report = pipeline::run_explain(&cfg, &args.checkpoint, &image, &out)?;
            emit(&serde_json::json!({ "verdict": report.explanation.verdict }))?;
        }
        Command::PerceptStudy { args, domains, samples } => {
            let (cfg, out) = load(&args.common)?;
            let domains = domains
                .map(|ds| ds.iter().map(|d| d.parse::<Domain>()).collect::<Result<Vec<_>>>())
                .transpose()?;
            let report = pipeline::run_percept(&cfg, &args.checkpoint, &out, domains.as_deref(), samples)?;
            emit(&serde_json::json!({ "cells": report.cells.len() }))?;
        }
        Command::Report(c) => {
            let (cfg, out) = load(&c)?;
            let summary = pipeline::run_report(&cfg, &out)?;
            emit(&summary.verification)?;
        }
        Command::Verify { dir } => {
            let report = checkpoint::verify_dir(&dir)?;
            emit(&report)?;
            return Ok(report.is_clean());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            let record = ErrorRecord {
                status: "error",
                kind: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) => 4,
        _ => 1,
    }
}
