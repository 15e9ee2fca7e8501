use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ResolvedConfig;
use crate::backbone::{GateMode, Network};
use crate::data::{load_preset, DataSplits, SubsetRecord};
use crate::error::{Error, Result};
use crate::numerics::Checkpoint;
use crate::runtime::{budget_grid, budget_sweep, skip_pattern_report, write_jsonl, InferenceRecord, SkipReport, SweepReport};
use crate::training::{ddi_finetune, evaluate, iadi_joint_phase, pretrain, warmup_phase, EvalMetrics, PhaseReport};
use crate::VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Warmup,
    Iadi,
    Ddi,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Pretrain, Phase::Warmup, Phase::Iadi, Phase::Ddi];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Warmup => "warmup",
            Phase::Iadi => "iadi",
            Phase::Ddi => "ddi",
        }
    }

    fn previous(self) -> Option<Phase> {
        match self {
            Phase::Pretrain => None,
            Phase::Warmup => Some(Phase::Pretrain),
            Phase::Iadi => Some(Phase::Warmup),
            Phase::Ddi => Some(Phase::Iadi),
        }
    }
}

pub fn checkpoint_path(out: &Path, phase: Phase) -> PathBuf {
    out.join(format!("ckpt-{}.ckpt", phase.name()))
}

/// Phase outcome without the per-step records, which go to the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub iterations: usize,
    pub tail_skip_ratio: f64,
    pub sign_flips: usize,
    pub final_task_loss: Option<f64>,
    pub final_total_loss: Option<f64>,
}

impl From<&PhaseReport> for PhaseSummary {
    fn from(r: &PhaseReport) -> Self {
        PhaseSummary {
            phase: r.phase.clone(),
            iterations: r.iterations,
            tail_skip_ratio: r.tail_skip_ratio,
            sign_flips: r.sign_flips,
            final_task_loss: r.records.last().map(|x| x.task_loss),
            final_total_loss: r.records.last().map(|x| x.total),
        }
    }
}

/// Header shared by every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub engine_version: String,
    pub command: String,
    pub config: ResolvedConfig,
    pub data: SubsetRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutput {
    pub provenance: Provenance,
    pub summary: PhaseSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub provenance: Provenance,
    pub phases: Vec<PhaseSummary>,
    /// Held-out metrics of the joint-phase checkpoint, hard gates.
    pub iadi: EvalMetrics,
    /// Held-out metrics of the final network, hard gates.
    pub final_hard: EvalMetrics,
    /// Held-out metrics of the final network with every gate open.
    pub final_open: EvalMetrics,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    Ok(serde_json::from_str(&text)?)
}

fn prepare_out(cfg: &ResolvedConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

pub fn load_data(cfg: &ResolvedConfig) -> Result<DataSplits> {
    load_preset(&cfg.dataset, cfg.seed, cfg.data_root.as_deref())
}

fn provenance(cfg: &ResolvedConfig, command: &str, data: &DataSplits) -> Provenance {
    Provenance { engine_version: VERSION.to_string(), command: command.to_string(), config: cfg.clone(), data: data.record.clone() }
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_network(cfg: &ResolvedConfig, path: &Path) -> Result<Network> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} does not exist", path.display())));
    }
    let net = Network::from_checkpoint(&Checkpoint::load(path)?)?;
    if net.arch != cfg.arch {
        return Err(Error::Config(format!(
            "checkpoint {} was built for a different architecture than `{}`",
            path.display(),
            cfg.arch_source
        )));
    }
    Ok(net)
}

fn save_network(net: &Network, path: &Path) -> Result<()> {
    net.checkpoint(false)?.save(path)
}

fn run_phase_on(net: &mut Network, phase: Phase, cfg: &ResolvedConfig, data: &DataSplits) -> Result<PhaseReport> {
    let t = &cfg.train;
    match phase {
        Phase::Pretrain => pretrain(net, &data.train, t),
        Phase::Warmup => warmup_phase(net, &data.train, t, &cfg.metric),
        Phase::Iadi => iadi_joint_phase(net, &data.train, t, &cfg.metric),
        Phase::Ddi => ddi_finetune(net, &data.train, t),
    }
}

fn finish_phase(net: &Network, phase: Phase, report: &PhaseReport, out: &Path) -> Result<()> {
    fs::write(out.join(format!("log-{}.jsonl", phase.name())), report.log_lines()?)?;
    save_network(net, &checkpoint_path(out, phase))
}

/// Runs one phase. The starting network comes from `from`, else from the
/// previous phase's checkpoint in `out`; pretraining starts from scratch.
pub fn cmd_phase(cfg: &ResolvedConfig, out: &Path, phase: Phase, from: Option<&Path>) -> Result<PhaseOutput> {
    prepare_out(cfg, out)?;
    let data = load_data(cfg)?;
    let mut net = match (from, phase.previous()) {
        (Some(p), _) => load_network(cfg, p)?,
        (None, Some(prev)) => load_network(cfg, &checkpoint_path(out, prev))?,
        (None, None) => Network::build(&cfg.arch, cfg.seed)?,
    };
    let report = run_phase_on(&mut net, phase, cfg, &data)?;
    finish_phase(&net, phase, &report, out)?;
    let result = PhaseOutput { provenance: provenance(cfg, phase.name(), &data), summary: PhaseSummary::from(&report) };
    write_json(&out.join(format!("phase-{}.json", phase.name())), &result)?;
    Ok(result)
}

/// Every phase in sequence with per-phase checkpoints and step logs, then
/// held-out evaluation into `metrics.json`. A failing phase leaves the
/// previous checkpoints in place.
pub fn cmd_train(cfg: &ResolvedConfig, out: &Path) -> Result<TrainMetrics> {
    prepare_out(cfg, out)?;
    let data = load_data(cfg)?;
    let mut net = Network::build(&cfg.arch, cfg.seed)?;
    let mut phases = Vec::new();
    let mut iadi = None;
    for phase in Phase::ALL {
        let report = run_phase_on(&mut net, phase, cfg, &data)?;
        finish_phase(&net, phase, &report, out)?;
        phases.push(PhaseSummary::from(&report));
        if phase == Phase::Iadi {
            iadi = Some(evaluate(&net, &data.test, GateMode::Hard, &cfg.report_metric)?);
        }
    }
    let metrics = TrainMetrics {
        provenance: provenance(cfg, "train", &data),
        phases,
        iadi: iadi.expect("joint phase ran"),
        final_hard: evaluate(&net, &data.test, GateMode::Hard, &cfg.report_metric)?,
        final_open: evaluate(&net, &data.test, GateMode::Open, &cfg.report_metric)?,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalMode {
    Adaptive,
    AllExits,
    Budget(Vec<f64>),
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Adaptive => "adaptive",
            EvalMode::AllExits => "all_exits",
            EvalMode::Budget(_) => "budget",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub provenance: Provenance,
    pub checkpoint: String,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budgets: Option<SweepReport>,
}

fn default_checkpoint(out: &Path, from: Option<&Path>) -> PathBuf {
    from.map_or_else(|| checkpoint_path(out, Phase::Ddi), Path::to_path_buf)
}

fn checkpoint_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Held-out evaluation of a checkpoint. Adaptive mode also writes the
/// per-sample results and the skip-pattern report.
pub fn cmd_eval(cfg: &ResolvedConfig, out: &Path, checkpoint: Option<&Path>, mode: &EvalMode) -> Result<EvalOutput> {
    prepare_out(cfg, out)?;
    let data = load_data(cfg)?;
    let ckpt = default_checkpoint(out, checkpoint);
    let net = load_network(cfg, &ckpt)?;
    let metric = &cfg.report_metric;
    let mut result = EvalOutput {
        provenance: provenance(cfg, "eval", &data),
        checkpoint: checkpoint_label(&ckpt),
        mode: mode.name().to_string(),
        metrics: None,
        budgets: None,
    };
    match mode {
        EvalMode::Adaptive | EvalMode::AllExits => {
            result.metrics = Some(evaluate(&net, &data.test, GateMode::Hard, metric)?);
        }
        EvalMode::Budget(limits) => {
            let all: Vec<usize> = (0..data.test.len()).collect();
            let sweep = budget_sweep(&net, &data.test, &all, metric, limits, cfg.policy)?;
            if let Some(p) = sweep.points.iter().find(|p| p.feasible == 0) {
                return Err(Error::BudgetInfeasible { limit: p.limit, min_budget: min_first_exit_cost(&net, &data, metric)? });
            }
            result.budgets = Some(sweep);
        }
    }
    if *mode == EvalMode::Adaptive {
        let report = skip_pattern_report(&net, &data.test, metric)?;
        write_results(&net, &data, metric, out)?;
        write_json(&out.join("skip_report.json"), &report)?;
        write_json(&out.join("skip_summary.json"), &report.summary(Some(&data.test)))?;
    }
    write_json(&out.join(format!("eval-{}.json", mode.name())), &result)?;
    Ok(result)
}

fn min_first_exit_cost(net: &Network, data: &DataSplits, metric: &crate::costmodel::Metric) -> Result<f64> {
    let (mean, std) = net.norm_stats();
    let norm = crate::data::Normalization { mean, std };
    let mut best = f64::INFINITY;
    for i in 0..data.test.len() {
        best = best.min(crate::runtime::first_exit_cost(net, &data.test.tensor(&[i], &norm)?, metric)?);
    }
    Ok(best)
}

fn write_results(net: &Network, data: &DataSplits, metric: &crate::costmodel::Metric, out: &Path) -> Result<()> {
    let (mean, std) = net.norm_stats();
    let norm = crate::data::Normalization { mean, std };
    let mut rows = Vec::with_capacity(data.test.len());
    for i in 0..data.test.len() {
        let r = crate::runtime::adaptive_infer(net, &data.test.tensor(&[i], &norm)?, metric)?;
        rows.push(InferenceRecord::new(i, data.test.labels[i] as usize, &r));
    }
    write_jsonl(fs::File::create(out.join("results.jsonl"))?, &rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub provenance: Provenance,
    pub checkpoint: String,
    pub sweep: SweepReport,
    /// Accuracy of the final head with every gate open, for reference.
    pub base_accuracy: f64,
    pub vanilla_cost: f64,
}

/// Budgeted inference over the held-out split at each limit, or at an
/// evenly spaced grid of `points` limits when none are given.
pub fn cmd_budget_sweep(cfg: &ResolvedConfig, out: &Path, checkpoint: Option<&Path>, limits: &[f64], points: usize) -> Result<SweepOutput> {
    prepare_out(cfg, out)?;
    let data = load_data(cfg)?;
    let ckpt = default_checkpoint(out, checkpoint);
    let net = load_network(cfg, &ckpt)?;
    let metric = &cfg.report_metric;
    let grid = if limits.is_empty() { budget_grid(&net, metric, points)? } else { limits.to_vec() };
    let all: Vec<usize> = (0..data.test.len()).collect();
    let sweep = budget_sweep(&net, &data.test, &all, metric, &grid, cfg.policy)?;
    let base = evaluate(&net, &data.test, GateMode::Open, metric)?;
    let result = SweepOutput {
        provenance: provenance(cfg, "budget-sweep", &data),
        checkpoint: checkpoint_label(&ckpt),
        base_accuracy: base.accuracy,
        vanilla_cost: base.vanilla_cost,
        sweep,
    };
    write_json(&out.join("sweep.json"), &result)?;
    fs::write(out.join("sweep.csv"), sweep_table(&result)?)?;
    Ok(result)
}

#[derive(Serialize)]
struct SweepRow {
    budget: f64,
    ddi_acc: f64,
    base_acc: Option<f64>,
    feasible: usize,
    mean_cost: f64,
    max_cost: f64,
}

fn sweep_table(s: &SweepOutput) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &s.sweep.points {
        w.serialize(SweepRow {
            budget: p.limit,
            ddi_acc: p.accuracy,
            base_acc: (p.limit >= s.vanilla_cost).then_some(s.base_accuracy),
            feasible: p.feasible,
            mean_cost: p.mean_cost,
            max_cost: p.max_cost,
        })?;
    }
    csv_string(w)
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

#[derive(Serialize)]
struct FrontierRow {
    mean_cost: f64,
    accuracy: f64,
    budget: f64,
    feasible: usize,
}

/// Turns evaluation outputs in `run` into plot-ready files. Reads only
/// files written by earlier commands, so repeated runs give identical bytes.
pub fn cmd_report(run: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let sweep_path = run.join("sweep.json");
    let skip_path = run.join("skip_report.json");
    if !sweep_path.exists() && !skip_path.exists() {
        return Err(Error::Config(format!(
            "{} has neither sweep.json nor skip_report.json; run `budget-sweep` or `eval --mode adaptive` first",
            run.display()
        )));
    }
    if sweep_path.exists() {
        let s: SweepOutput = read_json(&sweep_path)?;
        let mut rows: Vec<FrontierRow> = s
            .sweep
            .points
            .iter()
            .filter(|p| p.feasible > 0)
            .map(|p| FrontierRow { mean_cost: p.mean_cost, accuracy: p.accuracy, budget: p.limit, feasible: p.feasible })
            .collect();
        rows.sort_by(|a, b| a.mean_cost.total_cmp(&b.mean_cost).then(a.budget.total_cmp(&b.budget)));
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)?;
        }
        let path = run.join("frontier.csv");
        fs::write(&path, csv_string(w)?)?;
        written.push(path);
    }
    if skip_path.exists() {
        let rep: SkipReport = read_json(&skip_path)?;
        let path = run.join("skip_pattern.csv");
        fs::write(&path, rep.to_csv()?)?;
        written.push(path);
        for (name, idx) in [("easy_indices.txt", &rep.easy), ("hard_indices.txt", &rep.hard)] {
            let path = run.join(name);
            let text: String = idx.iter().map(|i| format!("{}\n", i)).collect();
            fs::write(&path, text)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::Data(_) | Error::MissingData { .. } => 3,
        Error::Divergence { .. } | Error::WarmupFailed { .. } => 4,
        Error::BudgetInfeasible { .. } => 5,
        _ => 1,
    }
}
