/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigFlags;

#[derive(Parser, Debug)]
#[command(name = "ctnet", version, about = "Hierarchical convolution-transformer point cloud classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Report mAcc, OA and the confusion matrix of a checkpoint.
    Eval(EvalArgs),
    /// Print the top-k classes of one cloud.
    Classify(ClassifyArgs),
    /// Parameter and FLOP table across scales, mechanisms and operators.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write per-point saliency scores as a 7-column XYZ file.
    Saliency(SaliencyArgs),
    /// Generate the synthetic dataset and its manifest.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest (default: the synthetic dataset).
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
    /// Suppress per-epoch output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest (default: the run configuration next to the checkpoint).
    #[arg(long, value_name = "MANIFEST")]
    pub data: Option<PathBuf>,
    /// Run configuration describing the dataset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Point cloud file (.xyz/.txt/.pts, .off, .ply).
    pub cloud: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Seed for resampling to the model's point count.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Class count of the output layer.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// ops, blocks, model or all.
    #[arg(long, default_value = "all")]
    pub scope: String,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub cloud: PathBuf,
    /// Target class, by name or index (default: the predicted class).
    #[arg(long = "class")]
    pub class: Option<String>,
    /// Output file (default: `<cloud stem>.saliency.xyz` next to the input).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 25)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    /// Gaussian noise along the normal.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated shape names (default: all eight).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Keep every shape in its canonical pose and size.
    #[arg(long)]
    pub no_augment: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Classify(a) => commands::classify(a),
        Command::Bench(a) => commands::bench(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Saliency(a) => commands::saliency(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ctnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
