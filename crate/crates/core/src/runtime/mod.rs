//! Hard-gated inference: input-adaptive execution, anytime prediction under
//! a cost budget, and skip-pattern analysis.

mod infer;
mod report;

pub use infer::{adaptive_infer, budget_grid, budgeted_infer, first_exit_cost, BranchPolicy, Budget, ExitLogits, InferenceResult};
pub use report::{
    budget_sweep, classify_difficulty, classify_skip_ratio, skip_pattern_report, write_jsonl, BlockFrequency, Category, InferenceRecord,
    SkipReport, SkipSummary, SweepPoint, SweepReport, EASY_ABOVE, HARD_BELOW,
};
