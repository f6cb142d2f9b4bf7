use std::path::PathBuf;
use std::process::ExitCode;

use cal::commands::{self, Command, Context};
use cal::config::ExperimentConfig;
use cal::error::{CliError, CliResult};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cal", version, about = "Causal-abstraction experiments on small MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Maximum number of jobs run at once.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
    /// Output root; the config's `out_dir` is resolved below it.
    #[arg(long, value_name = "DIR", env = "CAL_OUT_DIR", default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Sub {
    /// Write base and interchange datasets.
    GenData(Common),
    /// Train (or only initialise) the network for each seed.
    TrainDnn(Common),
    /// Fit alignment maps with distributed alignment search.
    TrainAlign(Common),
    /// Score stored alignment maps on the test interventions.
    EvalIia(Common),
    /// Greedy neuron-set search under the identity map.
    GreedyId(Common),
    /// Data, networks and alignments for the whole grid plus aggregates.
    Sweep(Common),
    /// Build and verify the lookup-table alignment on a finite input set.
    VacuityDemo(Common),
    /// Hidden-state collisions and minimal distances per pair class.
    InjectivityProbe(Common),
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::GenData(c) => (Command::GenData, c),
            Sub::TrainDnn(c) => (Command::TrainDnn, c),
            Sub::TrainAlign(c) => (Command::TrainAlign, c),
            Sub::EvalIia(c) => (Command::EvalIia, c),
            Sub::GreedyId(c) => (Command::GreedyId, c),
            Sub::Sweep(c) => (Command::Sweep, c),
            Sub::VacuityDemo(c) => (Command::VacuityDemo, c),
            Sub::InjectivityProbe(c) => (Command::InjectivityProbe, c),
        }
    }
}

fn execute(cmd: Command, common: Common) -> CliResult<commands::Summary> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if common.jobs == 0 {
        return Err(CliError::config("--jobs must be at least 1"));
    }
    let root = match &cfg.out_dir {
        Some(sub) => common.out.join(sub),
        None => common.out.clone(),
    };
    commands::run(cmd, &Context::new(cfg, root, common.jobs))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    let (cmd, common) = cli.command.split();
    match execute(cmd, common) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
