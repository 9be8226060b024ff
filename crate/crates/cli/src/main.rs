//! `reid` — person re-identification pipeline front-end.
//!
//! Subcommands: `extract` (dataset to feature dumps), `train` (metrics,
//! codebooks and part-two models per trial), `eval` (CMC/mAP reports),
//! `synth` (procedural two-camera dataset), `plot` (CSV to SVG).
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reid_core::ErrorClass;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "reid", version, about = "Bag-of-visual-words person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Pipeline configuration file (`key = value` with [section] headers).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set codebook.k=64` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> reid_core::Result<PipelineConfig> {
        let mut config = PipelineConfig::from_file(&self.config)?;
        for spec in &self.overrides {
            config.apply_override(spec)?;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset, segment, and write per-channel feature dumps.
    Extract {
        #[command(flatten)]
        config: ConfigArgs,
        /// Redo extraction even when the cache is up to date.
        #[arg(long)]
        force: bool,
        /// Write each image's superpixel label map as a 16-bit PNG.
        #[arg(long)]
        dump_labels: bool,
    },
    /// Train per-trial metrics, codebooks and the part-two scorer.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// RNG seed; required so training runs are reproducible.
        #[arg(long)]
        seed: u64,
    },
    /// Rank test probes with the trained models and write reports.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write an SVG CMC plot.
        #[arg(long)]
        svg: bool,
        /// Also write each trial's descriptor matrix next to its models.
        #[arg(long)]
        dump_descriptors: bool,
    },
    /// Generate a synthetic two-camera dataset.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        ids: usize,
        #[arg(long, default_value_t = 1)]
        per_camera: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 24)]
        width: usize,
        /// Camera-1 hue rotation in turns.
        #[arg(long, default_value_t = 0.07)]
        hue: f64,
        /// Camera-1 gamma on the value channel.
        #[arg(long, default_value_t = 1.25)]
        gamma: f64,
        /// Camera-1 additive noise sigma (0..255 scale).
        #[arg(long, default_value_t = 10.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a synthetic 32x32x32 color-name table here.
        #[arg(long)]
        color_table: Option<PathBuf>,
    },
    /// Combine CMC CSV files into one SVG plot.
    Plot {
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated curve labels (defaults to file stems).
        #[arg(long)]
        labels: Option<String>,
        /// Input CSV files.
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> reid_core::Result<()> {
    match cli.command {
        Command::Extract {
            config,
            force,
            dump_labels,
        } => commands::cmd_extract(&config.load()?, force, dump_labels),
        Command::Train { config, seed } => commands::cmd_train(&config.load()?, seed),
        Command::Eval {
            config,
            svg,
            dump_descriptors,
        } => commands::cmd_eval(&config.load()?, svg, dump_descriptors),
        Command::Synth {
            out,
            ids,
            per_camera,
            height,
            width,
            hue,
            gamma,
            noise,
            seed,
            color_table,
        } => commands::cmd_synth(
            &out,
            ids,
            per_camera,
            height,
            width,
            hue,
            gamma,
            noise,
            seed,
            color_table.as_deref(),
        ),
        Command::Plot { out, labels, inputs } => {
            commands::cmd_plot(&out, &inputs, labels.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            match err.class() {
                ErrorClass::Config => ExitCode::from(2),
                ErrorClass::Data => ExitCode::from(3),
                ErrorClass::Numeric => ExitCode::from(4),
            }
        }
    }
}
