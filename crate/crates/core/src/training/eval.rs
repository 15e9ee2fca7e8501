use serde::{Deserialize, Serialize};

use crate::backbone::{GateMode, Network};
use crate::costmodel::{dynamic_cost, Metric};
use crate::data::{Dataset, Difficulty, Normalization};
use crate::error::{Error, Result};
use crate::numerics::ops::argmax_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitAccuracy {
    /// `1..=N` for branches, `N + 1` for the final head.
    pub exit: usize,
    pub name: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub metric: String,
    /// Final-head accuracy.
    pub accuracy: f64,
    pub exit_accuracies: Vec<ExitAccuracy>,
    pub mean_skip_ratio: f64,
    /// Mean realized cost of final-head inference, gate overhead included.
    pub mean_realized_cost: f64,
    /// Cost of the ungated network under the same metric.
    pub vanilla_cost: f64,
    pub gate_overhead: f64,
    pub savings: f64,
    pub per_sample_skip: Vec<f64>,
    /// Mean skip ratio over ground-truth easy and hard samples, when known.
    pub easy_skip_ratio: Option<f64>,
    pub hard_skip_ratio: Option<f64>,
    /// Final-head accuracy over ground-truth easy and hard samples.
    pub easy_accuracy: Option<f64>,
    pub hard_accuracy: Option<f64>,
}

const EVAL_BATCH: usize = 250;

/// Deterministic pass over `data` with batchnorm in eval mode and every exit
/// evaluated. Costs are accounted as if only the final head ran.
pub fn evaluate(net: &Network, data: &Dataset, gates: GateMode, metric: &Metric) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let (mean, std) = net.norm_stats();
    let norm = Normalization { mean, std };
    let k = net.num_classes();
    let mut correct = vec![0usize; net.num_exits()];
    let mut per_sample_skip = Vec::with_capacity(data.len());
    let mut head_correct = Vec::with_capacity(data.len());
    let mut cost = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let x = data.tensor(chunk, &norm)?;
        let (logits, traces) = net.infer_batch(&x, gates)?;
        let labels = data.labels_usize(chunk);
        for (e, l) in logits.iter().enumerate() {
            let hits: Vec<bool> = argmax_rows(l.data(), k).iter().zip(&labels).map(|(p, y)| p == y).collect();
            correct[e] += hits.iter().filter(|&&h| h).count();
            if e + 1 == logits.len() {
                head_correct.extend(hits);
            }
        }
        for mut t in traces {
            per_sample_skip.push(t.skip_ratio());
            t.branches.clear();
            cost += dynamic_cost(&t, &net.ledger, metric)?.total;
        }
    }
    let n = data.len() as f64;
    let exit_accuracies: Vec<ExitAccuracy> = correct
        .iter()
        .enumerate()
        .map(|(e, &c)| ExitAccuracy {
            exit: e + 1,
            name: net.branches.get(e).map_or_else(|| "head".to_string(), |b| b.name.clone()),
            accuracy: c as f64 / n,
        })
        .collect();
    let mean_realized_cost = cost / n;
    let vanilla_cost = net.ledger.static_metric(metric);
    let subset_mean = |d: Difficulty, v: &dyn Fn(usize) -> f64| {
        let idx = data.indices_with(d);
        (!idx.is_empty()).then(|| idx.iter().map(|&i| v(i)).sum::<f64>() / idx.len() as f64)
    };
    let skip = |i: usize| per_sample_skip[i];
    let hit = |i: usize| head_correct[i] as u8 as f64;
    Ok(EvalMetrics {
        samples: data.len(),
        metric: metric.name().to_string(),
        accuracy: exit_accuracies.last().map_or(0.0, |e| e.accuracy),
        exit_accuracies,
        mean_skip_ratio: per_sample_skip.iter().sum::<f64>() / n,
        mean_realized_cost,
        vanilla_cost,
        gate_overhead: metric.of(&net.ledger.gate_overhead()),
        savings: if vanilla_cost > 0.0 { 1.0 - mean_realized_cost / vanilla_cost } else { 0.0 },
        easy_skip_ratio: subset_mean(Difficulty::Easy, &skip),
        hard_skip_ratio: subset_mean(Difficulty::Hard, &skip),
        easy_accuracy: subset_mean(Difficulty::Easy, &hit),
        hard_accuracy: subset_mean(Difficulty::Hard, &hit),
        per_sample_skip,
    })
}
