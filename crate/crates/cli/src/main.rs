mod config;
mod manifest;
mod run;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train, evaluate and fit pedestrian crossing models.
#[derive(Debug, Parser)]
#[command(name = "pedcross", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration, or a manifest.json from an earlier run.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Base seed (overrides the configuration).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for grid training and rollouts.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; created if missing.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ideal,
    PerSigma,
    Conditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    All,
    Lmd,
    Lmp,
    Lsp,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an ideal-observer model, one model per σ_v on a grid, or one
    /// σ_v-conditioned model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// σ_v grid as start:stop:step (per-sigma and conditioned modes).
        #[arg(long)]
        grid: Option<String>,
        /// Episode cap per model.
        #[arg(long)]
        max_episodes: Option<usize>,
    },
    /// Greedy rollouts of trained models: acceptance rates, crossing-time
    /// CDFs and estimated-TTA dispersion.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files or directories containing them.
        #[arg(long, required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        /// σ_v values to evaluate every model at (list or start:stop:step).
        #[arg(long)]
        sigmas: Option<String>,
        /// Scenario ids, comma separated.
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<u32>>,
        #[arg(long)]
        rollouts: Option<usize>,
        /// Draws per dispersion cell; 0 skips the dispersion table.
        #[arg(long)]
        dispersion_samples: Option<usize>,
    },
    /// Fit σ_v to a crossing-time dataset and compare model variants by AIC.
    Fit {
        #[command(flatten)]
        common: Common,
        /// CSV with columns participant_id,v0_mps,d0_m,cit_s.
        #[arg(long)]
        data: PathBuf,
        /// Directory of per-σ_v checkpoints.
        #[arg(long)]
        bank: PathBuf,
        /// σ_v-conditioned checkpoint, enabling the LSP variant.
        #[arg(long)]
        conditioned: Option<PathBuf>,
        /// Grid for the conditioned model; defaults to the bank's grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        /// Model rollouts per (σ_v, scenario) density.
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Generate a synthetic dataset in the human-data schema from model
    /// rollouts at known σ_v.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Directory of per-σ_v checkpoints.
        #[arg(long, conflicts_with = "conditioned", required_unless_present = "conditioned")]
        bank: Option<PathBuf>,
        /// σ_v-conditioned checkpoint.
        #[arg(long)]
        conditioned: Option<PathBuf>,
        /// Participant σ_v values; participants cycle through the list.
        #[arg(long)]
        sigmas: String,
        /// Number of participants (defaults to one per listed σ_v).
        #[arg(long)]
        participants: Option<usize>,
        /// Trials per scenario per participant.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Check files (or every file under directories) against the artifact
    /// schemas.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, mode, grid, max_episodes } => run::train(&common, mode, grid.as_deref(), max_episodes),
        Command::Eval { common, models, sigmas, scenarios, rollouts, dispersion_samples } => {
            run::eval(&common, &models, sigmas.as_deref(), scenarios, rollouts, dispersion_samples)
        }
        Command::Fit { common, data, bank, conditioned, grid, variant, rollouts } => {
            run::fit(&common, &data, &bank, conditioned.as_deref(), grid.as_deref(), variant, rollouts)
        }
        Command::Synth { common, bank, conditioned, sigmas, participants, repeats } => {
            run::synth(&common, bank.as_deref(), conditioned.as_deref(), &sigmas, participants, repeats)
        }
        Command::Validate { paths } => validate::run(&paths),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    use pedcross::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::IncompatibleModel { .. } | E::EmptyGrid => EXIT_CONFIG,
                E::Data { .. } | E::Csv(_) | E::Json(_) | E::Checkpoint(_) | E::MissingScenario(_) | E::NoSamples | E::Io(_) => {
                    EXIT_DATA
                }
                _ => EXIT_RUNTIME,
            };
        }
        if cause.downcast_ref::<validate::SchemaError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_RUNTIME
}
