//! `convexnet` command-line front end.
//!
//! Every subcommand writes its artifacts into `--out` and prints a summary
//! JSON object on stdout. Failures print one JSON object on stderr and exit
//! with a non-zero code.

mod commands;
mod config;
mod failure;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use convexnet::arrangements::PlanMode;

use config::{apply_config_file, RunConfig, SynthSpec};
use failure::Failure;

#[derive(Parser)]
#[command(name = "convexnet", version, about = "Convex training of parallel three-layer ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a teacher-network dataset
    Synth(Common),
    /// Build an arrangement plan
    Plan(Common),
    /// Solve the convex program and reconstruct a network
    TrainConvex(Common),
    /// Train the non-convex network with SGD
    TrainSgd(Common),
    /// Rebuild a network from a saved convex solution
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Duality certificate for a convex solution or a trained network
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "network")]
        solution: Option<PathBuf>,
        /// network JSON; lifted into the plan's convex variables
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Convex solve against several SGD initialisations
    Compare(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanModeArg {
    Sampled,
    Exact,
}

#[derive(Args)]
struct Common {
    /// JSON config applied on top of the flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// label column index (default: last)
    #[arg(long)]
    label_column: Option<usize>,
    /// teacher data as N,D,M1,K
    #[arg(long, value_parser = parse_synth)]
    synth: Option<SynthSpec>,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    center_labels: bool,
    #[arg(long)]
    m1: Option<usize>,
    /// number of parallel subnets for SGD
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    plan_mode: Option<PlanModeArg>,
    #[arg(long)]
    p1: Option<usize>,
    #[arg(long)]
    p2: Option<usize>,
    /// existing plan.json
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// SGD batch size (default: full batch)
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// number of SGD initialisations in `compare`
    #[arg(long)]
    sgd_seeds: Option<usize>,
    #[arg(long)]
    no_projection: bool,
    #[arg(long)]
    no_polish: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn parse_synth(s: &str) -> Result<SynthSpec, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n, d, m1, k] => Ok(SynthSpec { n, d, m1, k }),
        _ => Err("expected N,D,M1,K".into()),
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::default();
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        cfg.csv = self.csv.clone();
        cfg.label_column = self.label_column;
        cfg.synth = self.synth;
        cfg.standardize = self.standardize;
        cfg.center_labels = self.center_labels;
        set!(self.m1 => cfg.m1);
        set!(self.k => cfg.k);
        set!(self.beta => cfg.beta);
        if let Some(m) = self.plan_mode {
            cfg.plan_mode = match m {
                PlanModeArg::Sampled => PlanMode::Sampled,
                PlanModeArg::Exact => PlanMode::Exact,
            };
        }
        set!(self.p1 => cfg.p1_target);
        set!(self.p2 => cfg.p2_target);
        cfg.plan_file = self.plan.clone();
        cfg.seed = self.seed;
        cfg.train_fraction = self.train_fraction;
        set!(self.lr => cfg.sgd.lr);
        cfg.sgd.batch = self.batch.or(cfg.sgd.batch);
        set!(self.epochs => cfg.sgd.epochs);
        set!(self.sgd_seeds => cfg.sgd.seeds);
        if self.no_projection {
            cfg.sgd.projection = false;
        }
        if self.no_polish {
            cfg.solver.polish = false;
        }
        set!(self.out => cfg.out_dir);
        if let Some(path) = &self.config {
            cfg = apply_config_file(&cfg, path)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, Failure> {
    match cli.command {
        Command::Synth(c) => commands::synth(&c.resolve()?),
        Command::Plan(c) => commands::plan(&c.resolve()?),
        Command::TrainConvex(c) => commands::train_convex(&c.resolve()?),
        Command::TrainSgd(c) => commands::train_sgd(&c.resolve()?),
        Command::Reconstruct { common, solution } => commands::reconstruct_cmd(&common.resolve()?, &solution),
        Command::Certify {
            common,
            solution,
            network,
        } => commands::certify_cmd(&common.resolve()?, solution.as_deref(), network.as_deref()),
        Command::Compare(c) => commands::compare(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let f = Failure::usage(e.render().to_string().trim_end());
            eprintln!("{}", f.to_json());
            return ExitCode::from(f.exit_code as u8);
        }
        // help and version
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(summary) => {
            // a closed stdout is not a failure of the run
            let _ = writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code as u8)
        }
    }
}
