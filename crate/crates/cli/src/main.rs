mod audit;
mod run;
mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use mgtrade_core::sim::{materialize, RealizedInputs, ScenarioConfig, SimError};

/// Environment variable naming the directory runs are written under when
/// `--out` is not given.
pub const OUT_ROOT_ENV: &str = "MGTRADE_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Parser)]
#[command(name = "mgtrade", version, about = "Simulate energy trading between microgrids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write slot logs, summaries and an audit.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Trading mode; defaults to the one in the config.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Re-check the bounds of a finished run, or tabulate a sweep, from its logs.
    Audit {
        /// Run directory, or a directory of runs written by `run --mode both` or `sweep`.
        dir: PathBuf,
        /// Config to audit against instead of the one saved with the run.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run without trading at several V and compare each run with the clairvoyant benchmark.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Fractions of V_max, each in (0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
        fractions: Vec<f64>,
    },
}

#[derive(clap::Args)]
struct ScenarioArgs {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: $MGTRADE_OUT/<scenario name>, or runs/<scenario name>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of slots.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Auction,
    Solo,
    Both,
}

/// Why a command failed; each kind has its own exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Invariant(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Data(e) => write!(f, "{e:#}"),
            Failure::Invariant(msg) => write!(f, "invariant violated: {msg}"),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

/// A loaded scenario with its overrides applied and inputs realized.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub inputs: RealizedInputs,
    pub out: PathBuf,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario, Failure> {
        if !self.config.is_file() {
            return Err(Failure::Usage(anyhow::anyhow!("config file {} not found", self.config.display())));
        }
        let mut config = ScenarioConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(horizon) = self.horizon {
            if horizon == 0 {
                return Err(Failure::Usage(anyhow::anyhow!("--horizon must be at least 1")));
            }
            config.horizon_slots = horizon;
        }
        config.microgrids()?;
        let base = self.config.parent().unwrap_or(Path::new("."));
        let inputs = materialize(&config, base).with_context(|| format!("realizing inputs of {}", self.config.display()))?;
        let out = match &self.out {
            Some(dir) => dir.clone(),
            None => default_out_root().join(&config.name),
        };
        Ok(Scenario { config, inputs, out })
    }
}

fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { scenario, mode } => run::run(scenario.load()?, mode),
        Command::Audit { dir, config } => audit::audit(&dir, config.as_deref()),
        Command::Sweep { scenario, fractions } => {
            if let Some(bad) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                return Err(Failure::Usage(anyhow::anyhow!("sweep fraction {bad} outside (0, 1]")));
            }
            sweep::sweep(scenario.load()?, &fractions)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
