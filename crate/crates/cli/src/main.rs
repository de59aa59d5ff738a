use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use softimit_cli::{cmd_bandit, cmd_plot, cmd_tabular, cmd_verify, Exit, PlotKind, RunOptions, Suite};
use softimit_core::study::AgentKind;

#[derive(Parser)]
#[command(
    name = "softimit",
    version,
    about = "Soft imitation experiments: tabular study, 1-D bandit, property suites"
)]
struct Cli {
    /// TOML config with optional tabular and bandit sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $SOFTIMIT_OUT/COMMAND, or softimit-out/COMMAND).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent study cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Exit 1 with a JSON error report if any study cell fails.
    #[arg(long, global = true)]
    strict: bool,
    /// Recompute and compare against the existing manifest instead of writing.
    #[arg(long, global = true)]
    check: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gridworld imitation study: table1.csv, diagnostics, value and occupancy heatmaps.
    Tabular {
        /// Comma-separated subset of expert,bc,classifier,meirl,gail,csil.
        #[arg(long, value_delimiter = ',')]
        agents: Option<Vec<String>>,
    },
    /// Contextual bandit: reward grids before and after refinement.
    Bandit {
        #[arg(long)]
        no_refine: bool,
    },
    /// Run one property suite; exits 2 if any property fails.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
    },
    /// Render a CSV as SVG.
    Plot {
        #[arg(value_enum)]
        kind: PlotArg,
        input: PathBuf,
        output: PathBuf,
        /// Value column for long-form heatmap CSVs.
        #[arg(long)]
        value: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Inversion,
    Shaping,
    Coherence,
    Stationarity,
    Gradients,
    Estimator,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Inversion => Suite::Inversion,
            SuiteArg::Shaping => Suite::Shaping,
            SuiteArg::Coherence => Suite::Coherence,
            SuiteArg::Stationarity => Suite::Stationarity,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Estimator => Suite::Estimator,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotArg {
    Heatmap,
    Curve,
}

fn run(cli: Cli) -> softimit_cli::Result<Exit> {
    let opts = RunOptions {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        jobs: cli.jobs,
        strict: cli.strict,
        check: cli.check,
    };
    match cli.command {
        Command::Tabular { agents } => {
            let agents = agents
                .map(|names| {
                    names
                        .iter()
                        .map(|n| n.parse::<AgentKind>())
                        .collect::<Result<Vec<_>, _>>()
                })
                .transpose()?;
            cmd_tabular(&opts, agents)
        }
        Command::Bandit { no_refine } => cmd_bandit(&opts, no_refine),
        Command::Verify { suite } => cmd_verify(&opts, suite.into()),
        Command::Plot {
            kind,
            input,
            output,
            value,
        } => {
            let kind = match kind {
                PlotArg::Heatmap => PlotKind::Heatmap,
                PlotArg::Curve => PlotKind::Curve,
            };
            cmd_plot(&opts, kind, &input, &output, value.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(exit) => ExitCode::from(exit.code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Exit::Runtime.code() as u8)
        }
    }
}
