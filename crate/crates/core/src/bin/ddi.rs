use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ddi::cli::{self, EvalMode, Overrides, Phase, RunConfig};
use ddi::Error;

#[derive(Parser)]
#[command(name = "ddi", version = ddi::VERSION, about = "Train and evaluate dual dynamic inference networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for every output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset preset: synthetic, synthetic-small, mnist-5k, cifar-5k.
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset root; defaults to $DDI_DATA_ROOT, then ./data.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Architecture preset or path to an architecture TOML file.
    #[arg(long)]
    arch: Option<String>,
    /// Resource-loss metric during training: uniform, flops or energy.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    target_skip: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Plain backbone training with every gate open.
    Pretrain(Common),
    /// Gate-only training until nothing is skipped.
    Warmup(PhaseArgs),
    /// Joint backbone and gate training toward the target skip ratio.
    Iadi(PhaseArgs),
    /// End-to-end fine-tuning of every exit.
    Ddi(PhaseArgs),
    /// All phases in sequence, then held-out metrics.
    Train(Common),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Accuracy under a range of cost budgets.
    BudgetSweep(SweepArgs),
    /// Plot-ready CSV files from earlier evaluation outputs.
    Report {
        /// Run directory; defaults to the configured output directory.
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct PhaseArgs {
    /// Starting checkpoint; defaults to the previous phase's checkpoint in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Adaptive,
    AllExits,
    Budget,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; defaults to the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "adaptive")]
    mode: Mode,
    /// Budget limits in the report metric's units, for budget mode.
    #[arg(long, value_delimiter = ',')]
    budget: Vec<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Explicit budget limits; otherwise an evenly spaced grid.
    #[arg(long, value_delimiter = ',')]
    budget: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[command(flatten)]
    common: Common,
}

fn resolve(common: &Common) -> ddi::Result<(ddi::cli::ResolvedConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        dataset: common.dataset.clone(),
        data_root: common.data_root.clone(),
        arch: common.arch.clone(),
        metric: common.metric.clone(),
        target_skip: common.target_skip,
    });
    let out = cfg.out.clone();
    Ok((cfg.resolve()?, out))
}

fn print<T: serde::Serialize>(value: &T) -> ddi::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn phase(p: Phase, args: &PhaseArgs) -> ddi::Result<()> {
    let (cfg, out) = resolve(&args.common)?;
    let r = cli::cmd_phase(&cfg, &out, p, args.checkpoint.as_deref())?;
    print(&r.summary)
}

fn run(cli: Cli) -> ddi::Result<()> {
    match cli.command {
        Command::Pretrain(common) => phase(Phase::Pretrain, &PhaseArgs { checkpoint: None, common }),
        Command::Warmup(a) => phase(Phase::Warmup, &a),
        Command::Iadi(a) => phase(Phase::Iadi, &a),
        Command::Ddi(a) => phase(Phase::Ddi, &a),
        Command::Train(common) => {
            let (cfg, out) = resolve(&common)?;
            let m = cli::cmd_train(&cfg, &out)?;
            print(&serde_json::json!({
                "run": out,
                "phases": m.phases,
                "accuracy": m.final_hard.accuracy,
                "mean_skip_ratio": m.final_hard.mean_skip_ratio,
                "savings": m.final_hard.savings,
            }))
        }
        Command::Eval(a) => {
            let (cfg, out) = resolve(&a.common)?;
            let mode = match a.mode {
                Mode::Adaptive => EvalMode::Adaptive,
                Mode::AllExits => EvalMode::AllExits,
                Mode::Budget if a.budget.is_empty() => return Err(Error::Config("budget mode needs --budget".into())),
                Mode::Budget => EvalMode::Budget(a.budget),
            };
            let r = cli::cmd_eval(&cfg, &out, a.checkpoint.as_deref(), &mode)?;
            match (&r.metrics, &r.budgets) {
                (Some(m), _) => print(&serde_json::json!({
                    "accuracy": m.accuracy,
                    "exit_accuracies": m.exit_accuracies,
                    "mean_skip_ratio": m.mean_skip_ratio,
                    "mean_realized_cost": m.mean_realized_cost,
                    "vanilla_cost": m.vanilla_cost,
                })),
                (_, Some(s)) => print(&s.points.iter().map(|p| serde_json::json!({"budget": p.limit, "accuracy": p.accuracy})).collect::<Vec<_>>()),
                _ => Ok(()),
            }
        }
        Command::BudgetSweep(a) => {
            let (cfg, out) = resolve(&a.common)?;
            let r = cli::cmd_budget_sweep(&cfg, &out, a.checkpoint.as_deref(), &a.budget, a.points)?;
            println!("{:>14}  {:>8}  {:>8}  {:>8}", "budget", "ddi_acc", "base_acc", "feasible");
            for p in &r.sweep.points {
                let base = if p.limit >= r.vanilla_cost { format!("{:.4}", r.base_accuracy) } else { "-".into() };
                println!("{:>14.1}  {:>8.4}  {:>8}  {:>8}", p.limit, p.accuracy, base, p.feasible);
            }
            Ok(())
        }
        Command::Report { run, common } => {
            let dir = match run {
                Some(d) => d,
                None => resolve(&common)?.1,
            };
            for p in cli::cmd_report(&dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
