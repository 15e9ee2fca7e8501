use std::io::Write;

use serde::{Deserialize, Serialize};

use super::infer::{budgeted_infer, BranchPolicy, Budget, InferenceResult};
use crate::backbone::{GateMode, Network};
use crate::costmodel::{dynamic_cost, Metric};
use crate::data::{Dataset, Difficulty, Normalization};
use crate::error::{Error, Result};
use crate::trace::SkipTrace;

pub const EASY_ABOVE: f64 = 0.60;
pub const HARD_BELOW: f64 = 0.40;

/// Difficulty as judged by how much of the network an input skipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Easy,
    Medium,
    Hard,
}

pub fn classify_skip_ratio(ratio: f64) -> Category {
    if ratio > EASY_ABOVE {
        Category::Easy
    } else if ratio < HARD_BELOW {
        Category::Hard
    } else {
        Category::Medium
    }
}

pub fn classify_difficulty(result: &InferenceResult) -> Category {
    classify_skip_ratio(result.skip_ratio)
}

/// One JSON line of per-sample results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub sample_id: usize,
    pub pred: usize,
    pub label: usize,
    pub exit: usize,
    pub cost: f64,
    pub skip_ratio: f64,
    pub difficulty: Category,
}

impl InferenceRecord {
    pub fn new(sample_id: usize, label: usize, r: &InferenceResult) -> Self {
        InferenceRecord {
            sample_id,
            pred: r.prediction,
            label,
            exit: r.exit,
            cost: r.realized_cost,
            skip_ratio: r.skip_ratio,
            difficulty: classify_difficulty(r),
        }
    }
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFrequency {
    pub block_id: usize,
    pub name: String,
    pub stage: usize,
    pub gated: bool,
    pub first_of_stage: bool,
    /// Fraction of samples for which the block ran.
    pub frequency: f64,
    /// Mean fraction of output channels computed, skipped blocks counting 0.
    pub channel_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub samples: usize,
    pub metric: String,
    pub blocks: Vec<BlockFrequency>,
    pub per_sample_skip: Vec<f64>,
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
    pub medium: Vec<usize>,
    pub mean_skip_ratio: f64,
    pub mean_realized_cost: f64,
    pub vanilla_cost: f64,
    pub savings: f64,
    pub accuracy: f64,
}

/// Summary without the per-sample vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipSummary {
    pub samples: usize,
    pub metric: String,
    pub easy_count: usize,
    pub medium_count: usize,
    pub hard_count: usize,
    pub mean_skip_ratio: f64,
    pub mean_realized_cost: f64,
    pub vanilla_cost: f64,
    pub savings: f64,
    pub accuracy: f64,
    /// Mean skip ratio over ground-truth difficulty labels, when the dataset has them.
    pub ground_truth_easy_skip: Option<f64>,
    pub ground_truth_hard_skip: Option<f64>,
}

const BATCH: usize = 250;

/// Hard-gated pass over a dataset collecting per-block execution frequencies
/// and per-sample difficulty categories.
pub fn skip_pattern_report(net: &Network, data: &Dataset, metric: &Metric) -> Result<SkipReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot build a skip report from an empty dataset".into()));
    }
    let (mean, std) = net.norm_stats();
    let norm = Normalization { mean, std };
    let mut traces: Vec<SkipTrace> = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(BATCH) {
        let x = data.tensor(chunk, &norm)?;
        let (logits, batch) = net.infer_batch(&x, GateMode::Hard)?;
        let head = logits.last().expect("head logits");
        let pred = crate::numerics::ops::argmax_rows(head.data(), net.num_classes());
        correct += pred.iter().zip(data.labels_usize(chunk)).filter(|(p, y)| **p == *y).count();
        traces.extend(batch.into_iter().map(|mut t| {
            t.branches.clear();
            t
        }));
    }
    let n = traces.len() as f64;
    let blocks = net
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| BlockFrequency {
            block_id: i,
            name: u.name.clone(),
            stage: u.stage,
            gated: u.is_gated(),
            first_of_stage: i == 0 || net.units[i - 1].stage != u.stage,
            frequency: traces.iter().filter(|t| t.units[i].layer != Some(false)).count() as f64 / n,
            channel_fraction: traces.iter().map(|t| t.units[i].executed_fraction()).sum::<f64>() / n,
        })
        .collect();
    let per_sample_skip: Vec<f64> = traces.iter().map(SkipTrace::skip_ratio).collect();
    let mut cost = 0.0;
    for t in &traces {
        cost += dynamic_cost(t, &net.ledger, metric)?.total;
    }
    let pick = |c: Category| -> Vec<usize> { (0..per_sample_skip.len()).filter(|&i| classify_skip_ratio(per_sample_skip[i]) == c).collect() };
    let vanilla_cost = net.ledger.static_metric(metric);
    let mean_realized_cost = cost / n;
    Ok(SkipReport {
        samples: data.len(),
        metric: metric.name().to_string(),
        blocks,
        easy: pick(Category::Easy),
        hard: pick(Category::Hard),
        medium: pick(Category::Medium),
        mean_skip_ratio: per_sample_skip.iter().sum::<f64>() / n,
        per_sample_skip,
        mean_realized_cost,
        vanilla_cost,
        savings: if vanilla_cost > 0.0 { 1.0 - mean_realized_cost / vanilla_cost } else { 0.0 },
        accuracy: correct as f64 / n,
    })
}

impl SkipReport {
    /// Plot-ready rows: `block_id,name,stage,gated,first_of_stage,frequency,channel_fraction`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for b in &self.blocks {
            w.serialize(b)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn summary(&self, data: Option<&Dataset>) -> SkipSummary {
        let truth = |d: Difficulty| {
            let idx = data?.indices_with(d);
            (!idx.is_empty()).then(|| idx.iter().map(|&i| self.per_sample_skip[i]).sum::<f64>() / idx.len() as f64)
        };
        SkipSummary {
            samples: self.samples,
            metric: self.metric.clone(),
            easy_count: self.easy.len(),
            medium_count: self.medium.len(),
            hard_count: self.hard.len(),
            mean_skip_ratio: self.mean_skip_ratio,
            mean_realized_cost: self.mean_realized_cost,
            vanilla_cost: self.vanilla_cost,
            savings: self.savings,
            accuracy: self.accuracy,
            ground_truth_easy_skip: truth(Difficulty::Easy),
            ground_truth_hard_skip: truth(Difficulty::Hard),
        }
    }
}

/// One budget of a sweep, aggregated over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub limit: f64,
    /// Samples for which the first exit fit the budget.
    pub feasible: usize,
    /// Accuracy over feasible samples.
    pub accuracy: f64,
    pub mean_cost: f64,
    pub max_cost: f64,
    /// Count per exit index, index 0 unused.
    pub exit_histogram: Vec<usize>,
    pub within_budget: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric: String,
    pub policy: BranchPolicy,
    pub samples: usize,
    pub points: Vec<SweepPoint>,
    /// Samples whose exit index decreased somewhere along increasing budgets.
    pub monotonicity_violations: usize,
}

/// Budgeted inference of `indices` at every limit in `limits`.
pub fn budget_sweep(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
    metric: &Metric,
    limits: &[f64],
    policy: BranchPolicy,
) -> Result<SweepReport> {
    let (mean, std) = net.norm_stats();
    let norm = Normalization { mean, std };
    let mut sorted = limits.to_vec();
    sorted.sort_by(f64::total_cmp);
    let budgets: Vec<Budget> = sorted.iter().map(|&l| Budget::new(*metric, l)).collect::<Result<_>>()?;
    let mut exits = vec![vec![0usize; budgets.len()]; indices.len()];
    let mut points = Vec::with_capacity(budgets.len());
    let inputs: Vec<_> = indices.iter().map(|&i| data.tensor(&[i], &norm)).collect::<Result<_>>()?;
    let labels = data.labels_usize(indices);
    for (bi, budget) in budgets.iter().enumerate() {
        let mut p = SweepPoint {
            limit: budget.limit,
            feasible: 0,
            accuracy: 0.0,
            mean_cost: 0.0,
            max_cost: 0.0,
            exit_histogram: vec![0; net.num_exits() + 1],
            within_budget: true,
        };
        let mut correct = 0;
        for (si, x) in inputs.iter().enumerate() {
            match budgeted_infer(net, x, budget, policy) {
                Ok(r) => {
                    p.feasible += 1;
                    correct += (r.prediction == labels[si]) as usize;
                    p.mean_cost += r.realized_cost;
                    p.max_cost = p.max_cost.max(r.realized_cost);
                    p.within_budget &= r.realized_cost <= budget.limit;
                    p.exit_histogram[r.exit] += 1;
                    exits[si][bi] = r.exit;
                }
                Err(Error::BudgetInfeasible { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if p.feasible > 0 {
            p.accuracy = correct as f64 / p.feasible as f64;
            p.mean_cost /= p.feasible as f64;
        }
        points.push(p);
    }
    let monotonicity_violations = exits.iter().filter(|e| e.windows(2).any(|w| w[1] < w[0])).count();
    Ok(SweepReport { metric: metric.name().to_string(), policy, samples: indices.len(), points, monotonicity_violations })
}
