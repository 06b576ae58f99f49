//! `topogen`: dataset preparation, training, sampling and evaluation.
//!
//! Exit codes: 0 ok, 2 bad input, 3 resource cap, 4 invariant violation.

mod commands;
mod failure;
mod files;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use topogen::diffusion::VarianceMode;
use topogen::model::SizePreset;

#[derive(Parser)]
#[command(name = "topogen", version, about = "Topology-conditioned point-cloud diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sphere/torus dataset as `.xyz` files.
    Synth(SynthArgs),
    /// Subsample and normalize a directory of clouds, writing a manifest.
    Preprocess(PreprocessArgs),
    /// Persistence diagrams of every manifest cloud, one CSV per dimension.
    Extract(ExtractArgs),
    /// Persistence images from a diagram directory.
    Rasterize(RasterizeArgs),
    /// Fit the persistence-image VAE.
    TrainVae(TrainVaeArgs),
    /// Train the denoiser.
    Train(TrainArgs),
    /// Generate point clouds.
    Sample(SampleArgs),
    /// 1-NNA and coverage of generated clouds against a reference set.
    Eval(EvalArgs),
    /// Render a diagram CSV as SVG or a persistence image as PGM.
    Show(ShowArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub count: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Comma-separated: sphere, torus, double_torus.
    #[arg(long, default_value = "sphere,torus")]
    pub shapes: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PreprocessArgs {
    /// Directory of `.xyz`, `.txt` or `.tpc` clouds.
    pub input: PathBuf,
    /// Manifest CSV to write. Normalized clouds go to `clouds/` beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Random subsample size; 0 keeps every point.
    #[arg(long, default_value_t = 2048)]
    pub subsample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ExtractArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Farthest-point landmarks per cloud.
    #[arg(long, default_value_t = topogen::pipeline::DEFAULT_LANDMARKS)]
    pub n_pd: usize,
    #[arg(long, default_value_t = 3)]
    pub max_dim: usize,
    /// Largest filtration allowed per cloud.
    #[arg(long, default_value_t = topogen::homology::DEFAULT_SIMPLEX_CAP)]
    pub cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct RasterizeArgs {
    pub diagrams: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = topogen::pimage::DEFAULT_RESOLUTION)]
    pub resolution: usize,
    #[arg(long, default_value_t = topogen::pimage::DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Override the dataset-wide weight saturation point.
    #[arg(long)]
    pub b_max: Option<f64>,
}

#[derive(Args, Clone, Copy)]
pub struct Schedule {
    /// Optimizer steps; wins over `--epochs`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Passes over the dataset, converted to steps with the batch size.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainVaeArgs {
    pub images: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub latent: usize,
    #[arg(long, default_value_t = 1.0)]
    pub kl_weight: f64,
    #[command(flatten)]
    pub schedule: Schedule,
}

#[derive(Args)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    pub images: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "S")]
    pub size: SizePreset,
    /// Start from the small test configuration instead of `--size`.
    #[arg(long)]
    pub micro: bool,
    #[arg(long)]
    pub voxel: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    /// Extra `key=value` config entries, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the loss every this many steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[command(flatten)]
    pub schedule: Schedule,
}

#[derive(Args)]
pub struct SampleArgs {
    /// Denoiser checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Draw conditioning images from this VAE checkpoint.
    #[arg(long, conflicts_with_all = ["images", "zero_pi"])]
    pub vae: Option<PathBuf>,
    /// Condition on a stored pair instead: `<dir>/<id>.pi{1,2}.tpi`.
    #[arg(long, requires = "id")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    /// Condition on all-zero images.
    #[arg(long)]
    pub zero_pi: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    /// Respace the reverse chain to this many steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value = "beta")]
    pub sigma_mode: VarianceMode,
    /// Clamp on the clean estimate; 0 disables it.
    #[arg(long, default_value_t = topogen::diffusion::DEFAULT_CLIP)]
    pub clip: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of generated clouds.
    pub generated: PathBuf,
    /// Manifest of reference clouds.
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of `cd,emd`.
    #[arg(long, default_value = "cd,emd")]
    pub distances: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ShowArgs {
    /// Diagram CSV or `TPI1` image.
    pub input: PathBuf,
    /// `.svg` for diagrams, `.pgm` for images.
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Rasterize(a) => commands::rasterize(&a),
        Command::TrainVae(a) => commands::train_vae(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Show(a) => commands::show(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
