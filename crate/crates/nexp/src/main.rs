use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nexp::experiment::{self, CriterionName, ExperimentConfig, Outcome};
use nexp::{exit, Error};
use nexp_core::prune::{Schedule, Scope};
use nexp_core::sampling::Strategy;
use serde::de::DeserializeOwned;

/// Structured filter pruning experiments.
#[derive(Parser)]
#[command(name = "nexp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by the config.
    GenData,
    /// Train an architecture and write a checkpoint.
    Train,
    /// Write NEXP, importance and hybrid score maps for a checkpoint.
    Score,
    /// Prune a checkpoint to the target ratio.
    Prune,
    /// Prune, fine-tune and evaluate over the tau × alpha grid.
    HybridSweep,
    /// Prune at initialization to each 10^r params ratio, then train.
    PaiSweep,
    /// Compare two score maps over all layers and the first few.
    CompareMaps {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        first_n: Option<usize>,
    },
}

fn value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct Flags {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// nexp, l1, hybrid or random.
    #[arg(long, global = true, value_parser = value::<CriterionName>)]
    criterion: Option<CriterionName>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    steps_max: Option<usize>,
    /// Fraction of remaining groups removed per step.
    #[arg(long, global = true)]
    kappa: Option<f64>,
    /// global or local.
    #[arg(long, global = true, value_parser = value::<Scope>)]
    scope: Option<Scope>,
    /// one-shot or iterative.
    #[arg(long, global = true, value_parser = value::<Schedule>)]
    schedule: Option<Schedule>,
    /// random, kmeans, noise or full.
    #[arg(long, global = true, value_parser = value::<Strategy>)]
    sampling: Option<Strategy>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, env = "NEXP_WORKERS")]
    workers: Option<usize>,
}

impl Flags {
    fn apply(self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.seed => cfg.seed);
        set!(self.criterion => cfg.criterion);
        set!(self.tau => cfg.prune.tau);
        set!(self.alpha => cfg.hybrid.alpha);
        set!(self.steps_max => cfg.prune.steps_max);
        set!(self.kappa => cfg.prune.kappa_fraction);
        set!(self.scope => cfg.prune.scope);
        set!(self.schedule => cfg.prune.schedule);
        set!(self.sampling => cfg.sampling.strategy);
        set!(self.out => cfg.paths.out);
        set!(self.workers => cfg.workers);
        if self.dataset.is_some() {
            cfg.paths.dataset = self.dataset;
        }
        if self.checkpoint.is_some() {
            cfg.paths.checkpoint = self.checkpoint;
        }
    }
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let mut cfg = match &cli.flags.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cli.flags.apply(&mut cfg);
    if let Command::CompareMaps { first_n: Some(n), .. } = &cli.command {
        cfg.first_n = *n;
    }
    let cfg = cfg.resolve()?;
    match &cli.command {
        Command::GenData => experiment::cmd_gen_data(&cfg),
        Command::Train => experiment::cmd_train(&cfg),
        Command::Score => experiment::cmd_score(&cfg),
        Command::Prune => experiment::cmd_prune(&cfg),
        Command::HybridSweep => experiment::cmd_hybrid_sweep(&cfg),
        Command::PaiSweep => experiment::cmd_pai_sweep(&cfg),
        Command::CompareMaps { a, b, .. } => experiment::cmd_compare_maps(&cfg, a, b),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            if out.shortfall {
                eprintln!("nexp: target not reached, see the report for the shortfall");
                ExitCode::from(exit::SHORTFALL as u8)
            } else {
                ExitCode::from(exit::OK as u8)
            }
        }
        Err(e) => {
            eprintln!("nexp: {e}");
            let code = if e.is_numerical() { exit::NUMERICAL } else { exit::VALIDATION };
            ExitCode::from(code as u8)
        }
    }
}
