//! `vcfq` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on invalid input.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "vcfq", version, about = "Vertebral compression fracture quantification on CT volumes")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Pipeline config JSON; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set detector.noise_sigma_mm=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom volume and its ground truth.
    Phantom {
        /// Phantom spec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output stem (default: stem of the `--spec` file).
        #[arg(long)]
        name: Option<String>,
        /// Also write a NIfTI copy of the volume.
        #[arg(long)]
        nifti: bool,
    },
    /// Reduce a volume to a spine curve with limits.
    Localize {
        #[arg(long)]
        volume: PathBuf,
        /// Ground truth, required by the oracle locator.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also save the probability map as a container.
        #[arg(long)]
        probability: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Resample a volume along a spine curve.
    Straighten {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        curve: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Detect vertebrae on the mid-sagittal image of a straightened volume.
    Detect {
        /// Directory written by `straighten`.
        #[arg(long)]
        straightened: PathBuf,
        /// Ground truth for the oracle detector.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also save the dense detection field as containers.
        #[arg(long)]
        field_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Genant heights, index and grade for detected vertebrae.
    Grade {
        #[arg(long)]
        detections: PathBuf,
        /// Straightened directory, needed to map detections to world space.
        #[arg(long)]
        straightened: Option<PathBuf>,
        /// Write world-space predictions for `evaluate`.
        #[arg(long, requires = "straightened")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Match predictions to annotations and report metrics.
    Evaluate {
        /// Directory of `<id>.gt.json` files.
        #[arg(long)]
        annotations: PathBuf,
        /// Directory of `<id>.predictions.json` files.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run all stages on one or more volumes.
    Pipeline {
        #[arg(long = "volume", required = true)]
        volumes: Vec<PathBuf>,
        /// Ground truth of a single volume.
        #[arg(long, conflicts_with = "annotations_dir")]
        annotations: Option<PathBuf>,
        /// Directory of `<id>.gt.json` files paired by stem.
        #[arg(long)]
        annotations_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write a PPM sagittal overlay per volume.
        #[arg(long)]
        overlay: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match cli.command {
        Command::Phantom { spec, out, name, nifti } => commands::phantom(&spec, &out, name, nifti),
        Command::Localize {
            volume,
            annotations,
            out,
            probability,
            cfg,
        } => commands::localize(&volume, annotations.as_deref(), &out, probability.as_deref(), &cfg),
        Command::Straighten { volume, curve, out, cfg } => commands::straighten(&volume, &curve, &out, &cfg),
        Command::Detect {
            straightened,
            annotations,
            out,
            field_dir,
            cfg,
        } => commands::detect(&straightened, annotations.as_deref(), &out, field_dir.as_deref(), &cfg),
        Command::Grade {
            detections,
            straightened,
            predictions,
            out,
            cfg,
        } => commands::grade(&detections, straightened.as_deref(), predictions.as_deref(), &out, &cfg),
        Command::Evaluate {
            annotations,
            predictions,
            out,
            csv,
            cfg,
        } => commands::evaluate(&annotations, &predictions, &out, csv.as_deref(), &cfg),
        Command::Pipeline {
            volumes,
            annotations,
            annotations_dir,
            out,
            overlay,
            cfg,
        } => commands::pipeline(&volumes, annotations.as_deref(), annotations_dir.as_deref(), &out, overlay, &cfg),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
