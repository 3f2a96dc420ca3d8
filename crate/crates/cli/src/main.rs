//! `facet`: train eigenface bases, run black-box recovery against local or
//! remote oracles, serve an oracle over HTTP and evaluate reconstructions.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
//! 3 I/O, file format or transport error, 4 query budget exhausted.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facet_core::image::Geometry;
use facet_core::oracle::Nonlinearity;
use facet_core::AcceptMode;
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "facet", version, about = "Black-box face reconstruction with eigenface bases")]
struct Cli {
    /// Flat key=value settings file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a linear autoencoder basis on a directory of images.
    TrainBasis(TrainArgs),
    /// Recover an enrolled face from similarity scores alone.
    Recover(RecoverArgs),
    /// Recover every target under an attacked oracle and score with a critic.
    Evaluate(EvaluateArgs),
    /// Evaluate several bases and restart settings on the same targets.
    Ablation(AblationArgs),
    /// Serve a seeded random-embedding oracle over HTTP.
    ServeOracle(ServeArgs),
    /// Write a seeded set of synthetic face images.
    SynthFaces(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of .pgm/.ppm training images
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of basis vectors
    #[arg(long)]
    k: Option<usize>,
    /// Output basis file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop the mirror-symmetry target
    #[arg(long)]
    no_symmetry: bool,
    /// Drop the generative term
    #[arg(long)]
    no_generative: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Total oracle queries per target
    #[arg(long)]
    budget: Option<u64>,
    /// Iterations of each probe run
    #[arg(long)]
    restart_iters: Option<usize>,
    /// Candidates scored per iteration
    #[arg(long)]
    batch: Option<usize>,
    /// always | monotone
    #[arg(long)]
    accept: Option<AcceptMode>,
    /// Standard deviation of coefficient perturbations
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EmbedderArgs {
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// identity | tanh[:GAIN] | sine:FREQUENCY
    #[arg(long)]
    nonlinearity: Option<Nonlinearity>,
    /// Image subtracted before embedding, e.g. an average face
    #[arg(long, value_name = "FILE")]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RecoverArgs {
    #[arg(long)]
    basis: Option<PathBuf>,
    /// local:SEED or http://HOST:PORT
    #[arg(long)]
    oracle: Option<String>,
    /// Enrolled identity to attack
    #[arg(long)]
    id: Option<String>,
    /// Image enrolled under --id (local oracles only)
    #[arg(long)]
    target: Option<PathBuf>,
    /// Probe runs before committing to the best one (0: a single run)
    #[arg(long)]
    restarts: Option<usize>,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    embedder: EmbedderArgs,
    #[arg(long)]
    out_image: Option<PathBuf>,
    #[arg(long)]
    out_trajectory: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of target images; file stems become identities
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    basis: Option<PathBuf>,
    #[arg(long)]
    attacked_seed: Option<u64>,
    #[arg(long)]
    critic_seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    embedder: EmbedderArgs,
    /// Per-target CSV; the summary goes to <out>.summary.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every reconstruction here
    #[arg(long)]
    out_images: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Comma-separated LOSS=FILE pairs, e.g. SL=sl.eigb,SR+GR=full.eigb
    #[arg(long)]
    bases: Option<String>,
    /// Comma-separated restart counts
    #[arg(long)]
    restarts: Option<String>,
    #[arg(long)]
    attacked_seed: Option<u64>,
    #[arg(long)]
    critic_seed: Option<u64>,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    embedder: EmbedderArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// WxHxC, e.g. 32x32x1
    #[arg(long)]
    basis_geometry: Option<Geometry>,
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    nonlinearity: Option<Nonlinearity>,
    #[arg(long, value_name = "FILE")]
    reference: Option<PathBuf>,
    /// Total queries the server will answer
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    bind: Option<String>,
    /// ID=FILE, repeatable
    #[arg(long)]
    enroll: Vec<String>,
    /// Enroll every image in a directory under its file stem
    #[arg(long)]
    targets: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// WxHxC
    #[arg(long)]
    geometry: Option<Geometry>,
    /// Sampling seed
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the face part layout
    #[arg(long)]
    face_seed: Option<u64>,
    /// Also write the pixelwise mean image
    #[arg(long, value_name = "FILE")]
    mean: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .init();

    let result = config::Settings::load(cli.config.as_deref()).and_then(|settings| match cli.command {
        Command::TrainBasis(a) => commands::train_basis(a, settings),
        Command::Recover(a) => commands::recover(a, settings),
        Command::Evaluate(a) => commands::evaluate(a, settings),
        Command::Ablation(a) => commands::ablation(a, settings),
        Command::ServeOracle(a) => commands::serve_oracle(a, settings),
        Command::SynthFaces(a) => commands::synth_faces(a, settings),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("facet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
