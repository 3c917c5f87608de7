//! Command-line pipeline: synthesize a sequence, precompute flow, train and
//! run odometry, train the mapping network, build and query the keyframe
//! map, then evaluate, plot and report.

mod commands;
mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::dataio::DataError;
use crate::evaluation::EvalError;
use crate::mapping::MappingError;
use crate::odometry::OdometryError;
use crate::relocalization::RelocError;
use crate::tensor::CheckpointError;

pub use config::{parse_pairs, validate_config, Paths, QuerySet, RelocSettings, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "atdn", version, about = "Learned visual odometry and embedding-map relocalization")]
pub struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Render a synthetic ground-plane sequence and its pose file.
    Synth,
    /// Store exact flow between consecutive frames.
    FlowPrecompute,
    /// Train the odometry network with the curriculum.
    TrainVo,
    /// Predict and integrate relative poses.
    InferVo,
    /// Train the mapping autoencoder on keyframes.
    TrainMap,
    /// Embed keyframes into a map file.
    BuildMap,
    /// Relocalize query frames against the map.
    Relocalize {
        /// Query a single frame instead of the configured set.
        #[arg(long)]
        query: Option<u64>,
    },
    /// KITTI-style translation and rotation errors.
    Eval,
    /// Trajectory and embedding-distance figure data.
    Plot,
    /// Comparison table against the bundled baselines.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::FlowPrecompute => "flow-precompute",
            Command::TrainVo => "train-vo",
            Command::InferVo => "infer-vo",
            Command::TrainMap => "train-map",
            Command::BuildMap => "build-map",
            Command::Relocalize { .. } => "relocalize",
            Command::Eval => "eval",
            Command::Plot => "plot",
            Command::Report => "report",
        }
    }
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Fault(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Fault(_) => 3,
            CliError::Data(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }

    fn missing(key: &str, path: &Path) -> Self {
        CliError::Config(vec![format!("{key}: {} does not exist", path.display())])
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(errs) => {
                writeln!(f, "configuration error:")?;
                for e in errs {
                    writeln!(f, "  {e}")?;
                }
                Ok(())
            }
            CliError::Fault(m) => write!(f, "numeric fault: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<OdometryError> for CliError {
    fn from(e: OdometryError) -> Self {
        match e {
            OdometryError::FaultLimit { .. } => CliError::Fault(e.to_string()),
            OdometryError::InvalidConfig(_) | OdometryError::InvalidPlan(_) => CliError::Config(vec![e.to_string()]),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MappingError> for CliError {
    fn from(e: MappingError) -> Self {
        match e {
            MappingError::FaultLimit { .. } => CliError::Fault(e.to_string()),
            MappingError::InvalidConfig(_) => CliError::Config(vec![e.to_string()]),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RelocError> for CliError {
    fn from(e: RelocError) -> Self {
        match e {
            RelocError::Mapping(m) => m.into(),
            RelocError::Odometry(o) => o.into(),
            RelocError::Io(io) => io.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Console output and the per-phase timings file shared by all subcommands.
pub struct Session {
    pub cfg: RunConfig,
    pub quiet: bool,
    command: &'static str,
}

impl Session {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    /// Appends `command,phase,seconds` to `timings.csv` in the output directory.
    pub fn record(&self, phase: &str, seconds: f64) -> Result<(), CliError> {
        let path = self.cfg.paths.out.join("timings.csv");
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "command,phase,seconds")?;
        }
        writeln!(f, "{},{phase},{seconds}", self.command)?;
        Ok(())
    }

    pub fn timed<T>(&self, phase: &str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
        let t0 = Instant::now();
        let v = f()?;
        self.record(phase, t0.elapsed().as_secs_f64())?;
        Ok(v)
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("ATDN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // Ignored if a pool already exists.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads();
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Config(vec![format!("--config: cannot read {}: {e}", p.display())]))?,
        None => String::new(),
    };
    let cfg = validate_config(&text, cli.seed, cli.out.as_deref()).map_err(CliError::Config)?;
    for w in &cfg.warnings {
        if !cli.quiet {
            eprintln!("warning: {w}");
        }
    }
    fs::create_dir_all(&cfg.paths.out)?;
    let session = Session {
        quiet: cli.quiet,
        command: cli.command.name(),
        cfg,
    };
    session.say(format!(
        "{}: seed={} config={}",
        session.command, session.cfg.seed, session.cfg.hash
    ));
    let t0 = Instant::now();
    match cli.command {
        Command::Synth => commands::synth(&session),
        Command::FlowPrecompute => commands::flow_precompute(&session),
        Command::TrainVo => commands::train_vo(&session),
        Command::InferVo => commands::infer_vo(&session),
        Command::TrainMap => commands::train_map(&session),
        Command::BuildMap => commands::build_map(&session),
        Command::Relocalize { query } => commands::relocalize(&session, query),
        Command::Eval => commands::eval(&session),
        Command::Plot => commands::plot(&session),
        Command::Report => commands::report(&session),
    }?;
    session.record("total", t0.elapsed().as_secs_f64())
}

/// Process entry point for the `atdn` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprint!("{e}");
            if !matches!(e, CliError::Config(_)) {
                eprintln!();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
