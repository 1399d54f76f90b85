//! `palseg` command-line tool.
//!
//! Exit codes: 0 on success, 1 when an input fails validation or a command
//! fails, 2 on usage errors. Machine-readable results go to stdout as JSON;
//! progress and diagnostics go to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "palseg",
    version,
    about = "Panoramic annular unfolding and aerial-scene segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Unfold raw annular images into rectangular panoramas.
    Unfold(UnfoldArgs),
    /// Dataset utilities.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and print the IoU report.
    Eval(EvalArgs),
    /// Segment one image and write a colorized label map.
    Predict(PredictArgs),
    /// Time forward passes and print latency statistics.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct UnfoldArgs {
    /// Calibration JSON (center_x, center_y, r_inner, r_outer, theta_offset, clockwise).
    #[arg(long)]
    pub calib: PathBuf,
    /// A PNG file or a directory of PNG files.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory; file names mirror the inputs.
    #[arg(long)]
    pub out: PathBuf,
    /// Unfolded width in pixels (one full turn).
    #[arg(long, default_value_t = 2048)]
    pub width: usize,
    /// Unfolded height in pixels (inner to outer radius).
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    /// Sampling: nearest or bilinear.
    #[arg(long, default_value = "bilinear", value_parser = ["nearest", "bilinear"])]
    pub interp: String,
    /// Also write `<name>_mask.png` (255 where the sensor saw the ring, 0 in blind areas).
    #[arg(long)]
    pub emit_mask: bool,
    /// Put the outer radius on the first row instead of the inner one.
    #[arg(long)]
    pub flip_rows: bool,
    /// Value written into blind pixels.
    #[arg(long, default_value_t = 0)]
    pub fill: u8,
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Check a dataset directory and print a JSON report.
    Validate {
        /// Dataset root holding manifest.json (or images/ and labels/).
        #[arg(long)]
        root: PathBuf,
    },
    /// Write a synthetic track/field dataset for smoke tests.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training samples.
    #[arg(long, default_value_t = 4)]
    pub train: usize,
    /// Number of test samples.
    #[arg(long, default_value_t = 2)]
    pub test: usize,
    /// Sample width in pixels.
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Sample height in pixels.
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config JSON; omitted fields take their defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Split to evaluate: train or test.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input PNG (an unfolded panorama).
    #[arg(long)]
    pub image: PathBuf,
    /// Output path for the colorized label PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the colors alpha-blended over the input to this path.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Validity mask PNG (0 = blind); blind pixels get the ignore class.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Also write raw class ids as a single-channel PNG.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Class catalog JSON; needed when the model does not have 3 classes.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Overlay opacity of the class colors.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Checkpoint file; when omitted a randomly initialized --model is timed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Architecture for a checkpoint-free run: resnet18 or tiny-test.
    #[arg(long, default_value = "resnet18", value_parser = ["resnet18", "tiny-test"])]
    pub model: String,
    /// Number of classes for a checkpoint-free run.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Input shape N,C,H,W.
    #[arg(long, default_value = "1,3,512,2048")]
    pub shape: String,
    /// Timed forward passes.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Untimed forward passes before timing.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 0 for --help/--version and 2 for usage errors
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Unfold(a) => commands::unfold(&a),
        Command::Dataset(DatasetCommand::Validate { root }) => commands::dataset_validate(&root),
        Command::Dataset(DatasetCommand::Synth(a)) => commands::dataset_synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
