mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use proxpan::Precision;

use crate::config::{PathsSection, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "proxpan", version, about = "Convolutional sparse coding pansharpening")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory that receives every output of the run.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for dataset generation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true)]
    precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its train/test manifests.
    Synth,
    /// Fuse one pair with the classical proximal-gradient solver.
    Solve(PathArgs),
    /// Train the unfolded network on a manifest.
    Train(PathArgs),
    /// Fuse one pair with a trained checkpoint.
    Infer(PathArgs),
    /// Score fused rasters, or a checkpoint against EXP over a manifest.
    Eval(PathArgs),
    /// Compare taped gradients with central differences on a toy network.
    Gradcheck,
}

#[derive(Debug, Args)]
struct PathArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Generator banks written by `synth`.
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    pan: Option<PathBuf>,
    /// Native-resolution MS.
    #[arg(long)]
    ms: Option<PathBuf>,
    /// MS already interpolated to the PAN grid.
    #[arg(long)]
    ms_up: Option<PathBuf>,
    /// PAN degraded to the MS grid.
    #[arg(long)]
    pan_lr: Option<PathBuf>,
    #[arg(long)]
    fused: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
}

impl PathArgs {
    fn section(&self) -> PathsSection {
        PathsSection {
            manifest: self.manifest.clone(),
            checkpoint: self.checkpoint.clone(),
            generator: self.generator.clone(),
            pan: self.pan.clone(),
            ms: self.ms.clone(),
            ms_up: self.ms_up.clone(),
            pan_lr: self.pan_lr.clone(),
            fused: self.fused.clone(),
            reference: self.reference.clone(),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(proxpan::Error),
    GradcheckFailed(String),
}

impl From<proxpan::Error> for CliError {
    fn from(e: proxpan::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use proxpan::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::GradcheckFailed(_) => 1,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::Unsupported(_) | E::UnboundedStep => 2,
                E::Shape(_) | E::UndefinedMetric(_) => 3,
                E::Divergence(_) => 4,
                E::Io { .. } | E::Format(_) | E::Truncated { .. } | E::DimOverflow(_) | E::Json(_) => 5,
            },
        }
    }

    fn category(&self) -> &'static str {
        match self.exit_code() {
            1 => "gradcheck",
            2 => "config",
            3 => "shape",
            4 => "divergence",
            _ => "io",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::GradcheckFailed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    match &cli.command {
        Command::Solve(p) | Command::Train(p) | Command::Infer(p) | Command::Eval(p) => {
            cfg.paths.override_with(&p.section());
        }
        Command::Synth | Command::Gradcheck => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| proxpan::Error::Io {
        path: cli.out_dir.clone(),
        source: e,
    })?;
    let name = match cli.command {
        Command::Synth => "synth",
        Command::Solve(_) => "solve",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Gradcheck => "gradcheck",
    };
    commands::write_run_record(&cli.out_dir, name, &cfg)?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::Solve(_) => commands::solve(&cfg, out),
        Command::Train(_) => commands::train(&cfg, out),
        Command::Infer(_) => commands::infer(&cfg, out),
        Command::Eval(_) => commands::eval(&cfg, out),
        Command::Gradcheck => commands::gradcheck(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
