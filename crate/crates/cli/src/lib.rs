//! `rcloc` command-line driver.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rcloc::geom::{Intrinsics, Pose};
use rcloc::pipeline::PoseRecord;
use thiserror::Error;

pub use commands::{bench, eval, localize, make_bench, render, RenderArgs};
pub use config::{BenchSettings, MatcherKind, Overrides, RunConfig};
pub use plot::plot_cdf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TREND: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("trend assertion: {0}")]
    Trend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io(_) => EXIT_CONFIG,
            Self::Trend(_) => EXIT_TREND,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rcloc", version, about = "Render-and-compare camera localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Localize every query of a manifest.
    Localize(#[command(flatten)] Overrides),
    /// Render one view to PNG plus a depth file.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        /// Pose as JSON {"r": [9 row-major], "t": [3]}, or @file.
        #[arg(long)]
        pose: String,
        /// Intrinsics as JSON {fx, fy, cx, cy, width, height}, or @file.
        #[arg(long)]
        intrinsics: String,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
        /// Keep the texture instead of baking it into vertex colours.
        #[arg(long)]
        textured: bool,
        /// Disable headlight shading.
        #[arg(long)]
        flat: bool,
    },
    /// Generate a synthetic benchmark and run the ablation grid.
    Bench {
        #[command(flatten)]
        overrides: Overrides,
        /// Exit with status 3 when any trend check fails.
        #[arg(long)]
        assert_trends: bool,
        /// Write error_cdf.png.
        #[arg(long)]
        plot: bool,
    },
    /// Write a synthetic benchmark to disk as mesh, images and manifest.
    MakeBench(#[command(flatten)] Overrides),
    /// Recall of a results file against a manifest's ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn json_arg<T: serde::de::DeserializeOwned>(what: &str, arg: &str) -> Result<T, CliError> {
    let text = match arg.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?,
        None => arg.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{what}: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Localize(o) => localize(&RunConfig::resolve(&o)?),
        Command::Render {
            mesh,
            pose,
            intrinsics,
            out,
            textured,
            flat,
        } => {
            let pose: PoseRecord = json_arg("pose", &pose)?;
            let intrinsics: Intrinsics = json_arg("intrinsics", &intrinsics)?;
            render(&RenderArgs {
                mesh,
                pose: Pose::from_rt(&pose.r, &pose.t),
                intrinsics,
                out,
                bake_texture: !textured,
                flat,
            })
        }
        Command::Bench {
            overrides,
            assert_trends,
            plot,
        } => {
            let mut cfg = RunConfig::resolve(&overrides)?;
            cfg.bench.assert_trends |= assert_trends;
            cfg.bench.plot |= plot;
            bench(&cfg)
        }
        Command::MakeBench(o) => make_bench(&RunConfig::resolve(&o)?),
        Command::Eval { results, overrides } => eval(&results, &RunConfig::resolve(&overrides)?),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("event=failed reason=\"{e}\"");
            e.exit_code()
        }
    }
}
