mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Rotation equivariant vector field networks for dense labelling.
#[derive(Debug, Parser)]
#[command(name = "roteq", version)]
struct Cli {
    /// Worker threads (overrides ROTEQ_THREADS and the config).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress per-epoch progress lines.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic oriented-shapes dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config, command line, metrics and checkpoints to the run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (defaults to data.dir of the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val", value_parser = ["train", "val"])]
        split: String,
        /// Also write the scores as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_parser = ["f32", "f64"])]
        precision: Option<String>,
    },
    /// Label an image and write a palette PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// RTQT tensor (1, c, h, w) or PNG with raw band values.
        #[arg(long)]
        input: PathBuf,
        /// Height band for PNG inputs when the model expects one.
        #[arg(long)]
        height: Option<PathBuf>,
        /// Dataset manifest (band statistics, palette); defaults to
        /// manifest.json next to the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["f32", "f64"])]
        precision: Option<String>,
    },
    /// Measure rotation equivariance of a checkpoint.
    Equicheck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,45,90,180,270")]
        angles: Vec<f64>,
        /// Orientation counts to probe (defaults to the trained one).
        #[arg(long = "R-list", value_delimiter = ',')]
        r_list: Vec<usize>,
        /// Number of validation patches.
        #[arg(long, default_value_t = 20)]
        patches: usize,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_parser = ["f32", "f64"])]
        precision: Option<String>,
    },
    /// Single-thread forward timing against R, plus the size-matched baseline.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "R-list", value_delimiter = ',', default_value = "8,16,32,64,128")]
        r_list: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Tile side (defaults to data.tile of the config).
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = roteq::gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<roteq::Error>() {
                Some(roteq::Error::Config { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
