use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{AlphaController, LossBreakdown, TrainConfig};
use crate::backbone::{ForwardOptions, GateMode, Network};
use crate::costmodel::{expected_cost, Metric};
use crate::data::{BatchConfig, BatchIter, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::numerics::{Binder, ParamGroup, ParamStore, Sgd, Tape, Var};
use crate::seeds;

/// Summary of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub iterations: usize,
    pub records: Vec<LossBreakdown>,
    /// Mean batch skip ratio over the last fifth of the phase.
    pub tail_skip_ratio: f64,
    /// Sign changes of the resource weight within the phase.
    pub sign_flips: usize,
}

impl PhaseReport {
    fn new(phase: &str, records: Vec<LossBreakdown>) -> Self {
        let n = records.len();
        let tail = &records[n - (n / 5).max(1).min(n)..];
        let tail_skip_ratio = if tail.is_empty() { 0.0 } else { tail.iter().map(|r| r.skip_ratio).sum::<f64>() / tail.len() as f64 };
        let sign_flips = records.windows(2).filter(|w| w[0].alpha.signum() != w[1].alpha.signum()).count();
        PhaseReport { phase: phase.to_string(), iterations: n, records, tail_skip_ratio, sign_flips }
    }

    /// JSON lines, one object per step.
    pub fn log_lines(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

enum Objective {
    Task,
    /// Fixed negative weight on the resource term; drives gates open.
    Warmup(f64),
    Joint(AlphaController),
    AllExits,
}

struct PhaseSpec {
    name: &'static str,
    groups: Vec<ParamGroup>,
    gates: GateMode,
    bn_train: bool,
    branches: bool,
    iterations: usize,
    objective: Objective,
}

/// Sum of per-exit cross-entropies, branches first and the head last.
pub fn multi_exit_loss<T: crate::numerics::Real>(tape: &mut Tape<T>, exits: &[Var], labels: &[usize]) -> Result<(Var, Vec<Var>)> {
    let mut parts = Vec::with_capacity(exits.len());
    for &e in exits {
        parts.push(tape.softmax_cross_entropy(e, labels)?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok((total, parts))
}

fn batch_seed(seed: u64, phase: &str) -> u64 {
    seeds::stream(seed, &format!("batches.{}", phase)).random()
}

fn reset_momentum(store: &mut ParamStore) {
    for p in store.iter_mut() {
        p.momentum.data_mut().fill(0.0);
    }
}

fn normalization(net: &Network) -> Normalization {
    let (mean, std) = net.norm_stats();
    Normalization { mean, std }
}

/// Fits input normalization to `train` and stores it in the network.
pub fn fit_normalization(net: &mut Network, train: &Dataset) -> Result<()> {
    let n = Normalization::from_dataset(train)?;
    net.set_norm_stats(&n.mean, &n.std)
}

fn check_data(net: &Network, ds: &Dataset) -> Result<()> {
    if ds.chw() != net.input_shape() {
        return Err(Error::Data(format!("dataset images are {:?} but the network expects {:?}", ds.chw(), net.input_shape())));
    }
    if ds.num_classes > net.num_classes() {
        return Err(Error::Data(format!("dataset has {} classes, network {}", ds.num_classes, net.num_classes())));
    }
    Ok(())
}

/// Runs the step loop. `stop` sees each record and may end the phase early.
fn run_phase(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    metric: &Metric,
    mut spec: PhaseSpec,
    mut stop: impl FnMut(&LossBreakdown) -> bool,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    check_data(net, data)?;
    let norm = normalization(net);
    let bcfg = BatchConfig { batch_size: cfg.batch_size.min(data.len()), shuffle: true, augment: cfg.augment, seed: batch_seed(cfg.seed, spec.name) };
    let mut batches = BatchIter::new(data, &norm, bcfg)?;
    let sgd = Sgd { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    reset_momentum(&mut net.store);
    let mut last_good = net.store.clone();
    let mut records = Vec::with_capacity(spec.iterations);

    for it in 1..=spec.iterations {
        let batch = batches.next_batch()?;
        let mut tape = Tape::<f32>::new();
        let step = (|| -> Result<_> {
            let mut binder = Binder::new(&net.store, &spec.groups);
            let x = tape.constant(batch.images);
            let opts = ForwardOptions { gates: spec.gates, bn_train: spec.bn_train, branches: spec.branches };
            let pass = net.full_forward(&mut tape, &mut binder, x, &opts)?;
            let skip = pass.traces.iter().map(|t| t.skip_ratio()).sum::<f64>() / pass.traces.len() as f64;
            let ce = tape.softmax_cross_entropy(pass.head(), &batch.labels)?;
            let (mut total, mut resource, mut alpha, mut exit_losses) = (ce, 0.0, 0.0, Vec::new());
            match &mut spec.objective {
                Objective::Task => {}
                Objective::Warmup(_) | Objective::Joint(_) => {
                    alpha = match &mut spec.objective {
                        Objective::Warmup(a) => *a,
                        Objective::Joint(c) => c.update(skip),
                        _ => unreachable!(),
                    };
                    let e = expected_cost(&mut tape, &pass.soft_gates, &net.ledger, metric)?;
                    resource = tape.value(e).item() as f64;
                    let weighted = tape.affine(e, alpha as f32, 0.0)?;
                    total = tape.add(ce, weighted)?;
                }
                Objective::AllExits => {
                    let (t, parts) = multi_exit_loss(&mut tape, &pass.exits, &batch.labels)?;
                    exit_losses = parts.iter().map(|&p| tape.value(p).item() as f64).collect();
                    total = t;
                }
            }
            let record = LossBreakdown {
                phase: spec.name.to_string(),
                iteration: it,
                task_loss: tape.value(ce).item() as f64,
                resource_loss: resource,
                alpha,
                total: tape.value(total).item() as f64,
                exit_losses,
                skip_ratio: skip,
                lr: cfg.lr,
            };
            let grads = if record.total.is_finite() { Some(binder.collect(&tape.backward(total)?)) } else { None };
            Ok((record, grads, pass.bn_updates))
        })();
        let (record, grads, updates) = match step {
            Err(Error::NonFinite { .. }) => (None, None, Vec::new()),
            Err(e) => return Err(e),
            Ok((r, g, u)) => (Some(r), g, u),
        };
        let finite = grads.as_ref().is_some_and(|g| g.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
        let Some(record) = record.filter(|_| finite) else {
            net.store = last_good;
            return Err(Error::Divergence { phase: spec.name.to_string(), iteration: it });
        };
        for (id, g) in grads.unwrap() {
            net.store.accumulate_grad(id, g);
        }
        sgd.step(&mut net.store, &spec.groups)?;
        if spec.bn_train {
            net.apply_bn_updates(&updates);
        }
        if it % 50 == 0 {
            last_good = net.store.clone();
        }
        let done = stop(&record);
        records.push(record);
        if done {
            break;
        }
    }
    Ok(records)
}

/// Plain training of the backbone with every gate open. Fits the input
/// normalization first.
pub fn pretrain(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<PhaseReport> {
    fit_normalization(net, data)?;
    let spec = PhaseSpec {
        name: "pretrain",
        groups: vec![ParamGroup::Backbone],
        gates: GateMode::Open,
        bn_train: true,
        branches: false,
        iterations: cfg.pretrain_iterations,
        objective: Objective::Task,
    };
    let records = run_phase(net, data, cfg, &Metric::Uniform, spec, |_| false)?;
    Ok(PhaseReport::new("pretrain", records))
}

/// Trains only the gates, backbone frozen with batchnorm in eval mode, under
/// a negative resource weight until the skip ratio stays below the tolerance
/// for a full window of consecutive batches.
pub fn warmup_phase(net: &mut Network, data: &Dataset, cfg: &TrainConfig, metric: &Metric) -> Result<PhaseReport> {
    let spec = PhaseSpec {
        name: "warmup",
        groups: vec![ParamGroup::Gate],
        gates: GateMode::Soft,
        bn_train: false,
        branches: false,
        iterations: cfg.warmup_iterations,
        objective: Objective::Warmup(-cfg.warmup_alpha.abs()),
    };
    let mut streak = 0;
    let records = run_phase(net, data, cfg, metric, spec, |r| {
        streak = if r.skip_ratio < cfg.warmup_tolerance { streak + 1 } else { 0 };
        streak >= cfg.warmup_window
    })?;
    if streak < cfg.warmup_window {
        let ratio = records.last().map_or(1.0, |r| r.skip_ratio);
        return Err(Error::WarmupFailed { ratio, iterations: records.len() });
    }
    Ok(PhaseReport::new("warmup", records))
}

/// Joint training of backbone and gates on cross-entropy plus the signed
/// resource term, the sign set each batch by the skip-ratio controller.
pub fn iadi_joint_phase(net: &mut Network, data: &Dataset, cfg: &TrainConfig, metric: &Metric) -> Result<PhaseReport> {
    let spec = PhaseSpec {
        name: "iadi",
        groups: vec![ParamGroup::Backbone, ParamGroup::Gate],
        gates: GateMode::Soft,
        bn_train: true,
        branches: false,
        iterations: cfg.iadi_iterations,
        objective: Objective::Joint(AlphaController::new(cfg.alpha, cfg.target_skip)),
    };
    let records = run_phase(net, data, cfg, metric, spec, |_| false)?;
    Ok(PhaseReport::new("iadi", records))
}

/// End-to-end tuning of every exit with the unweighted sum of exit losses,
/// gates kept soft.
pub fn ddi_finetune(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<PhaseReport> {
    let mut groups = vec![ParamGroup::Backbone, ParamGroup::Gate];
    if !net.branches.is_empty() {
        groups.push(ParamGroup::Branch);
    }
    let spec = PhaseSpec {
        name: "ddi",
        groups,
        gates: GateMode::Soft,
        bn_train: true,
        branches: true,
        iterations: cfg.ddi_iterations,
        objective: Objective::AllExits,
    };
    let records = run_phase(net, data, cfg, &Metric::Uniform, spec, |_| false)?;
    Ok(PhaseReport::new("ddi", records))
}
