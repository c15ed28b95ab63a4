//! Command-line pipeline: dataset generation, tuning, portfolio
//! construction, control evaluation, reporting and the scripted studies.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod experiments;

pub use commands::{ControlEvalArgs, GenDataArgs, PortfolioArgs, ReportArgs, TuneArgs, TuneControlArgs};
pub use experiments::StudyArgs;

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Failure = 1,
    InvalidConfig = 2,
    MissingInput = 3,
    AllFailed = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(kind: ExitKind, source: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            source: source.into(),
        }
    }

    pub fn invalid(msg: impl fmt::Display) -> Self {
        Self::new(ExitKind::InvalidConfig, anyhow::anyhow!("{msg}"))
    }

    pub fn missing(msg: impl fmt::Display) -> Self {
        Self::new(ExitKind::MissingInput, anyhow::anyhow!("{msg}"))
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

impl From<mpc_portfolio::Error> for CliError {
    fn from(e: mpc_portfolio::Error) -> Self {
        use mpc_portfolio::Error as E;
        let kind = match &e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ExitKind::MissingInput,
            E::Io(_) => ExitKind::Failure,
            E::InvalidSpace(_)
            | E::InvalidConfiguration(_)
            | E::DimensionMismatch { .. }
            | E::InvalidArgument(_)
            | E::Parse(_)
            | E::Json(_) => ExitKind::InvalidConfig,
            E::NonFinite(_) | E::Empty(_) | E::Timeout => ExitKind::Failure,
        };
        Self::new(kind, e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        mpc_portfolio::Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ExitKind::InvalidConfig, e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mpc-portfolio", version, about = "Portfolio-warmstarted model tuning for data-driven MPC")]
pub struct Cli {
    /// Zero wallclock fields so reruns are byte-identical.
    #[arg(long, global = true)]
    pub canonical: bool,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Root for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "MPC_PORTFOLIO_OUT", default_value = "out")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a trajectory dataset from a simulator variant.
    GenData(GenDataArgs),
    /// Tune a model configuration on one dataset.
    Tune(TuneArgs),
    /// Build the performance matrix and greedy portfolio.
    Portfolio(PortfolioArgs),
    /// Score a model as an MPC controller on a task.
    ControlEval(ControlEvalArgs),
    /// Tune the MPC optimizer settings for a fixed model.
    TuneControl(TuneControlArgs),
    /// Aggregate traces and control results into tables and curves.
    Report(ReportArgs),
    /// Run one of the scripted studies from an experiment config.
    Study(StudyArgs),
}

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct Global {
    pub canonical: bool,
    pub out_root: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let global = Global {
        canonical: cli.canonical,
        out_root: cli.out_root,
    };
    let work = move || match cli.command {
        Command::GenData(a) => commands::gen_data(&a, &global).map(|_| ()),
        Command::Tune(a) => commands::tune(&a, &global).map(|_| ()),
        Command::Portfolio(a) => commands::portfolio(&a, &global).map(|_| ()),
        Command::ControlEval(a) => commands::control_eval(&a, &global).map(|_| ()),
        Command::TuneControl(a) => commands::tune_control(&a, &global).map(|_| ()),
        Command::Report(a) => commands::report(&a, &global).map(|_| ()),
        Command::Study(a) => experiments::run_study(&a, &global),
    };
    match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::new(ExitKind::Failure, e))?
            .install(work),
        None => work(),
    }
}
