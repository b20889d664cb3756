mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "rda",
    version,
    about = "Deformable implicit shape templates with a Killing-energy prior"
)]
struct Cli {
    /// Worker threads (1 gives bitwise-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of randomly rotated boxes.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Fit latent codes to shapes with a trained model.
    Encode(EncodeArgs),
    /// Turn latent codes into meshes.
    Reconstruct(ReconstructArgs),
    /// Extract the learned template mesh.
    Template(TemplateArgs),
    /// Export the stage-by-stage deformation of the template.
    Trajectory(TrajectoryArgs),
    /// Reconstruction metrics, noise robustness and isometry defect.
    Eval(EvalArgs),
    /// Check the Killing-norm integration-by-parts identity by quadrature.
    #[command(name = "verify-c")]
    VerifyC(VerifyArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub dim: u8,
    /// Defaults to 0, or to RDA_SEED when set.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Surface samples per shape.
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Riemannian,
    Pointwise,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON training config; missing fields take built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, conflicts_with = "resume")]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    /// Also write the checkpoint every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args)]
pub struct EncodeOptions {
    /// JSON encode config; flags below override it.
    #[arg(long)]
    pub encode_config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; every shape is encoded.
    #[arg(long, required_unless_present = "points", conflicts_with = "points")]
    pub data: Option<PathBuf>,
    /// Oriented point files, encoded with ids 0, 1, …
    #[arg(long, num_args = 1..)]
    pub points: Vec<PathBuf>,
    /// Output latent JSON file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub encode: EncodeOptions,
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Latent JSON file; defaults to the checkpoint's training codes.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Only this shape id.
    #[arg(long)]
    pub shape: Option<usize>,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TemplateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub res: Option<usize>,
    /// Output OBJ file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub shape: usize,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Vertex noise standard deviations; without it the clean split is evaluated.
    #[arg(long, num_args = 1..)]
    pub noise: Vec<f64>,
    #[arg(long)]
    pub res: Option<usize>,
    /// Also report the isometry defect over the checkpoint's training codes.
    #[arg(long)]
    pub isometry: bool,
    #[command(flatten)]
    pub encode: EncodeOptions,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FieldArg {
    Sine,
    Swirl,
    /// Does not vanish on the boundary, so the check is refused.
    Constant,
    Zero,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 256)]
    pub res: usize,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, value_enum, default_value = "sine")]
    pub field: FieldArg,
    /// Use finite-difference stencils even where analytic derivatives exist.
    #[arg(long)]
    pub fd: bool,
    /// Directory for the result JSON and run manifest.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Usage errors exit with 2, runtime failures with 1.
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Template(a) => commands::template(a),
        Command::Trajectory(a) => commands::trajectory(a),
        Command::Eval(a) => commands::eval(a),
        Command::VerifyC(a) => commands::verify(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
