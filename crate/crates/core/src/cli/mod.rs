//! Configuration and commands behind the `ddi` binary.

mod commands;
mod config;

pub use commands::{
    checkpoint_path, cmd_budget_sweep, cmd_eval, cmd_phase, cmd_report, cmd_train, exit_code, load_data, load_network, read_json,
    write_json, EvalMode, EvalOutput, Phase, PhaseOutput, PhaseSummary, Provenance, SweepOutput, TrainMetrics,
};
pub use config::{CostSection, DataSection, ModelSection, Overrides, ResolvedConfig, RunConfig, TrainSection};
