//! The `d3fields` command line: scene synthesis, fusion statistics, meshing,
//! tracking, goal correspondence and closed-loop planning.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data errors.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::Config;

#[derive(Debug, Parser)]
#[command(name = "d3fields", version, about = "Fused multi-view descriptor fields")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for stochastic steps (render noise, MPPI sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a JSON scene description into a scene directory.
    Synth {
        description: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print field statistics as JSON, optionally dumping the distance grid.
    Fuse {
        scene: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Write the sampled distance grid as a map file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Extract the zero level set as a binary PLY mesh.
    Mesh {
        scene: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long, value_enum)]
        colors: Option<config::ColorMode>,
    },
    /// Track keypoints through an ordered list of scene directories.
    Track {
        #[arg(required = true)]
        frames: Vec<PathBuf>,
        #[command(flatten)]
        keypoints: KeypointArgs,
        /// Trajectory CSV.
        #[arg(short, long)]
        output: PathBuf,
        /// Track each point independently instead of as a rigid body.
        #[arg(long)]
        non_rigid: bool,
    },
    /// Locate keypoints of a scene in a goal image.
    Correspond {
        scene: PathBuf,
        #[command(flatten)]
        keypoints: KeypointArgs,
        /// Goal descriptor map (f32).
        #[arg(long)]
        goal_features: PathBuf,
        /// Goal instance map (u8).
        #[arg(long)]
        goal_masks: Option<PathBuf>,
        /// Goal camera file; top-down over the instance when absent.
        #[arg(long)]
        goal_camera: Option<PathBuf>,
        #[arg(long)]
        goal_instance: Option<u8>,
        #[arg(long)]
        sharpness: Option<f64>,
        /// Goal points CSV.
        #[arg(short, long)]
        output: PathBuf,
        /// Directory for one grayscale PNG heatmap per keypoint.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Run the closed loop against the built-in pusher environment.
    Plan {
        /// Registered dynamics model.
        #[arg(long)]
        dynamics: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// JSON-lines step log.
        #[arg(short, long)]
        output: PathBuf,
        /// Directory for one PLY mesh per perception step.
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Lattice cell edge, metres.
    #[arg(long)]
    pub cell: Option<f64>,
    /// min_x,min_y,min_z,max_x,max_y,max_z
    #[arg(long, allow_hyphen_values = true, value_parser = parse_bounds)]
    pub bounds: Option<config::Bounds>,
}

fn parse_bounds(s: &str) -> Result<config::Bounds, String> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}")))
        .collect::<Result<_, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 6 comma-separated values, got {}", v.len()))
}

#[derive(Debug, Clone, Args)]
pub struct KeypointArgs {
    #[arg(long)]
    pub instance: Option<u8>,
    /// Number of keypoints.
    #[arg(long)]
    pub count: Option<usize>,
    /// Surface band for keypoint candidates, metres.
    #[arg(long)]
    pub tau_surf: Option<f64>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}", .0)]
    Io(#[from] d3fields::io::IoError),
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Data {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => d3fields::io::read_json::<Config>(path)?,
        None => Config::default(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| commands::dispatch(cli, &config))
}
