mod commands;
mod rundir;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit codes.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "comic", version, about = "Long-tailed partial-label multi-label training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic long-tailed dataset and mask its labels.
    BuildDataset(BuildArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Recompute evaluation metrics from a checkpoint.
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Emit CSV series and SVG charts from a run directory.
    PlotData(PlotArgs),
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Start from the dataset keys of a config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of classes.
    #[arg(long = "C", alias = "classes")]
    pub classes: Option<usize>,
    /// Feature dimension.
    #[arg(long = "d", alias = "dim")]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON-lines file; the manifest goes next to it.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Rlc,
    Mfm,
    Htb,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file; generated from the config's data keys when omitted.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Remove a module (repeatable).
    #[arg(long, value_enum)]
    pub disable: Vec<Module>,
    /// Classification loss: bce, focal, asl or mfm.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config key (repeatable), e.g. `--set tau=0.8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run name; defaults to the config file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Directory holding run directories.
    #[arg(long, env = "COMIC_RUN_ROOT", default_value = "runs")]
    pub run_root: PathBuf,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint file; defaults to the run's final checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to evaluate on; defaults to the run's dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check only these components (repeatable).
    #[arg(long)]
    pub component: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate one component's analytic gradient (harness self-test).
    #[arg(long, hide = true)]
    pub inject_sign_flip: Option<String>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory; defaults to `<run>/plots`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    pub fn numeric(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_NUMERIC,
            error: error.into(),
        }
    }
}

/// Library errors: non-finite losses are numeric failures, everything else
/// is a validation failure.
impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<comic_core::Error>() {
            Some(comic_core::Error::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_VALIDATION,
        };
        Failure { code, error }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::BuildDataset(a) => commands::build_dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::PlotData(a) => commands::plot_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
