//! `freqalign` command-line tool. Every command writes its artifacts and a
//! `run.json` record into the output directory.

mod commands;
mod config;
mod error;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "freqalign",
    version,
    about = "Spectral analysis, frequency alignment and detector experiments"
)]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed for every seeded component (default: config value, else 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts and the run record.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic real or fake image set.
    GenSynthetic(GenArgs),
    /// Spectral analysis of an image set.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Mean radial spectral profile of an image set.
    Profile(InputArgs),
    /// Power-law fit of the mean profile.
    FitPowerlaw(FitArgs),
    /// Relative spectral profile distance between two sets.
    Rspd(RspdArgs),
    /// Spectral magnitude rescaling of fake images.
    Smr(AlignArgs),
    /// Train the calibration network on real images.
    TrainRdc(TrainRdcArgs),
    /// Full alignment: rescaling then calibration.
    Align(AlignArgs),
    /// Apply a perturbation to every image of a set.
    Perturb(PerturbArgs),
    /// Train a detector without alignment-based defenses.
    TrainDetector(TrainDetectorArgs),
    /// Evaluate a saved detector.
    EvalDetector(EvalArgs),
    /// Train a detector under a defense protocol.
    Defend(DefendArgs),
    /// Frequency-bias experiments on synthetic data.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Mean log-magnitude spectrum and radial profile.
    Spectrum(InputArgs),
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Detectors trained on low-passed inputs.
    BiasBands(ExperimentArgs),
    /// Per-epoch evaluation of one full-band detector.
    BiasEpochs(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// real, fake-a or fake-b.
    #[arg(long, default_value = "real")]
    pub kind: String,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub strength: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Image directory or manifest CSV.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long)]
    pub fit_lo: Option<f64>,
    #[arg(long)]
    pub fit_hi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RspdArgs {
    #[arg(long, value_name = "PATH")]
    pub real: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub test: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Real reference corpus.
    #[arg(long, value_name = "PATH")]
    pub real: PathBuf,
    /// Fake reference corpus.
    #[arg(long, value_name = "PATH")]
    pub fake: PathBuf,
    /// Images to align (defaults to the fake corpus).
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Trained calibration model (required by `align`).
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Retrieved neighbours per corpus.
    #[arg(long)]
    pub k: Option<usize>,
    /// Threshold radius of the rescaling.
    #[arg(long)]
    pub rt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainRdcArgs {
    #[arg(long, value_name = "PATH")]
    pub real: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Threshold radius of the spectral noising.
    #[arg(long)]
    pub rt: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// blur, compress, noise or fgsm.
    #[arg(long)]
    pub kind: String,
    /// Blur kernel size (3, 5, 7 or 9).
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Compression quality in 1..=100.
    #[arg(long)]
    pub quality: Option<u32>,
    /// Noise variance in 8-bit units squared.
    #[arg(long)]
    pub variance: Option<f64>,
    /// FGSM step size.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Detector attacked by FGSM.
    #[arg(long, value_name = "PATH")]
    pub detector: Option<PathBuf>,
    /// True label of the inputs for FGSM.
    #[arg(long, default_value = "fake")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    #[arg(long, value_name = "PATH")]
    pub real: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub fake: PathBuf,
    /// pixel-cnn or profile-mlp.
    #[arg(long, default_value = "pixel-cnn")]
    pub kind: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Low-pass radius applied to every input.
    #[arg(long)]
    pub r0: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub detector: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub fake: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub real: Option<PathBuf>,
    /// Calibration model, for detectors that align their inputs.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Real reference corpus for alignment.
    #[arg(long, value_name = "PATH")]
    pub align_real: Option<PathBuf>,
    /// Fake reference corpus for alignment.
    #[arg(long, value_name = "PATH")]
    pub align_fake: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DefendArgs {
    #[arg(long, value_name = "PATH")]
    pub real: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub fake: PathBuf,
    /// none, mda, p1, p2 or p3.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Calibration model (required by p1, p2 and p3).
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Low-pass radii; the full band is always included.
    #[arg(long, num_args = 1..)]
    pub r0: Vec<f64>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
