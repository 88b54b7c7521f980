//! `shades` command-line interface: preprocess, train, infer, eval, panels,
//! selftest. Exit codes: 0 success, 1 usage error, 2 runtime error; errors
//! print a single line to stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod commands;
pub mod manifest;
pub mod panels;

#[derive(Parser)]
#[command(
    name = "shades",
    about = "Self-supervised monocular depth with non-Lambertian image decomposition",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the specular-removal prior cache (_rem/ and _mask/) for every
    /// sequence under the data root.
    Preprocess {
        /// Data root containing sequence directories of numbered frames.
        #[arg(long)]
        data: PathBuf,
        /// Camera file (key=value: fx, fy, cx, cy, k1, k2, p1, p2, k3).
        #[arg(long)]
        camera: PathBuf,
        /// Optional key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train depth, pose, and decomposition networks on the cached data.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints/, log.csv, and the config snapshot.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run single-frame inference over a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also regress relative poses of consecutive frames into poses.csv.
        #[arg(long)]
        pose_pairs: bool,
        /// Preprocess inputs (crop, resize, undistort) with this camera file
        /// to the checkpoint resolution. Without it inputs must match.
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate predicted depth against ground truth (median scaling).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Specular mask directory: adds the SSM column.
        #[arg(long)]
        spec_masks: Option<PathBuf>,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compose input|albedo|shading|depth|mask panels from inference output.
    Panels {
        /// Inference results directory.
        #[arg(long)]
        results: PathBuf,
        /// Output directory (defaults to the results directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fixture-based oracle suite of every module.
    Selftest,
}

/// Parse and dispatch. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprintln!("usage error: {}", first_line(&e.to_string()));
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Preprocess {
            data,
            camera,
            config,
        } => commands::preprocess(&data, &camera, config.as_deref()),
        Command::Train {
            data,
            camera,
            config,
            out,
        } => commands::train(&data, &camera, config.as_deref(), &out),
        Command::Infer {
            checkpoint,
            input,
            out,
            pose_pairs,
            camera,
            config,
        } => commands::infer_dir(
            &checkpoint,
            &input,
            &out,
            pose_pairs,
            camera.as_deref(),
            config.as_deref(),
        ),
        Command::Eval {
            pred,
            gt,
            spec_masks,
            out,
            config,
        } => commands::eval(&pred, &gt, spec_masks.as_deref(), &out, config.as_deref()),
        Command::Panels { results, out } => commands::panels(&results, out.as_deref()),
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", first_line(&format!("{e:#}")));
            2
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("unknown error").to_string()
}
