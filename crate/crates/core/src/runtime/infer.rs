use serde::{Deserialize, Serialize};

use crate::backbone::{BnCtx, Network};
use crate::costmodel::Metric;
use crate::error::{Error, Result};
use crate::gating;
use crate::numerics::ops::argmax_rows;
use crate::numerics::{Binder, Tape, Tensor, Var};
use crate::trace::{HaltedGates, SkipTrace, UnitTrace};

/// A hard per-sample limit on realized cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub metric: Metric,
    /// In the metric's units; `f64::INFINITY` means unconstrained.
    pub limit: f64,
}

impl Budget {
    pub fn new(metric: Metric, limit: f64) -> Result<Self> {
        if matches!(metric, Metric::Uniform) {
            return Err(Error::Config("budgets are expressed in FLOPs or energy, not the uniform metric".into()));
        }
        if !(limit > 0.0) {
            return Err(Error::Config(format!("budget limit must be positive, got {}", limit)));
        }
        Ok(Budget { metric, limit })
    }

    pub fn unlimited(metric: Metric) -> Result<Self> {
        Budget::new(metric, f64::INFINITY)
    }
}

/// When branch classifiers run under a budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchPolicy {
    /// Every branch reached within the limit is evaluated.
    #[default]
    Always,
    /// A branch is evaluated only when the worst-case cost of reaching the
    /// next exit no longer fits the remaining budget.
    Opportunistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitLogits {
    pub exit: usize,
    pub logits: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub prediction: usize,
    /// `1..=N` for branches, `N + 1` for the final head.
    pub exit: usize,
    pub realized_cost: f64,
    pub skip_ratio: f64,
    pub trace: SkipTrace,
    /// Logits of every exit evaluated, in order; the last is the one used.
    pub exits: Vec<ExitLogits>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Step {
    Stem,
    LayerGate,
    ChannelGate,
    Body,
    Branch(usize),
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Verdict {
    Run,
    Skip,
    Halt,
}

struct Outcome {
    trace: SkipTrace,
    exits: Vec<ExitLogits>,
    cost: f64,
}

fn as_batch_of_one(net: &Network, image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = net.input_shape();
    match image.shape() {
        [cc, hh, ww] | [1, cc, hh, ww] if [*cc, *hh, *ww] == [c, h, w] => image.clone().reshape(&[1, c, h, w]),
        other => Err(Error::shape("inference input", format!("expected [{}, {}, {}], got {:?}", c, h, w, other))),
    }
}

fn logits_of(tape: &Tape<f32>, v: Var) -> Vec<f32> {
    tape.value(v).data().to_vec()
}

/// Runs one normalized sample in execution order with hard gates, asking
/// `decide` before every costed step. Channel gates and bodies behind a
/// closed layer gate are never computed.
fn execute(net: &Network, image: &Tensor, metric: &Metric, mut decide: impl FnMut(Step, f64, f64) -> Verdict) -> Result<Outcome> {
    let x = as_batch_of_one(net, image)?;
    let ledger = &net.ledger;
    let mut tape = Tape::<f32>::inference();
    let mut binder = Binder::new(&net.store, &[]);
    let mut bn = BnCtx::new(false);
    let mut out = Outcome { trace: SkipTrace::default(), exits: Vec::new(), cost: 0.0 };

    let stem = ledger.stem_metric(metric);
    if decide(Step::Stem, stem, out.cost) != Verdict::Run {
        return Ok(out);
    }
    out.cost += stem;
    let x = tape.constant(x);
    let mut feature = net.stem_forward(&mut tape, &mut binder, x, &mut bn)?;
    let mut state = net.initial_gate_state(&mut tape, 1);
    let mut next_branch = 0;

    for (ui, unit) in net.units.iter().enumerate() {
        let m = ledger.unit_metric(ui, metric);
        let produced = if unit.is_gated() {
            if decide(Step::LayerGate, m.layer_gate, out.cost) != Verdict::Run {
                return Ok(out);
            }
            out.cost += m.layer_gate;
            let (l, next) = net.layer_gate_forward(&mut tape, &mut binder, ui, feature, state)?;
            state = next;
            if !gating::binarize(tape.value(l).item()) {
                out.trace.units.push(UnitTrace { unit: ui, gated: true, layer: Some(false), channels: None });
                net.unit_fallback(&mut tape, ui, feature)?
            } else {
                if decide(Step::ChannelGate, m.channel_gate, out.cost) != Verdict::Run {
                    out.trace.halted = Some(HaltedGates { unit: ui, channel_gate: false });
                    return Ok(out);
                }
                out.cost += m.channel_gate;
                let c = net.channel_gate_forward(&mut tape, &mut binder, ui, feature)?;
                let bits: Vec<bool> = tape.value(c).data().iter().map(|&v| gating::binarize(v)).collect();
                let t = UnitTrace { unit: ui, gated: true, layer: Some(true), channels: Some(bits) };
                let body_cost = ledger.body_metric(ui, t.executed_fraction(), metric);
                if decide(Step::Body, body_cost, out.cost) != Verdict::Run {
                    out.trace.halted = Some(HaltedGates { unit: ui, channel_gate: true });
                    return Ok(out);
                }
                out.cost += body_cost;
                let body = net.unit_body(&mut tape, &mut binder, ui, feature, &mut bn)?;
                let fallback = net.unit_fallback(&mut tape, ui, feature)?;
                let bits = t.channels.as_deref().unwrap_or_default();
                let mask = tape.constant(Tensor::from_fn(&[1, bits.len()], |i| if bits[i] { 1.0 } else { 0.0 }));
                out.trace.units.push(t);
                tape.blend_channels(body, fallback, mask)?
            }
        } else {
            let body_cost = ledger.body_metric(ui, 1.0, metric);
            if decide(Step::Body, body_cost, out.cost) != Verdict::Run {
                return Ok(out);
            }
            out.cost += body_cost;
            out.trace.units.push(UnitTrace::ungated(ui));
            net.unit_body(&mut tape, &mut binder, ui, feature, &mut bn)?
        };
        feature = net.unit_merge(&mut tape, ui, feature, produced)?;

        while next_branch < net.branches.len() && net.branches[next_branch].after_unit == ui {
            let b = next_branch;
            next_branch += 1;
            let cost = ledger.branch_metric(b, metric);
            match decide(Step::Branch(b), cost, out.cost) {
                Verdict::Halt => return Ok(out),
                Verdict::Skip => continue,
                Verdict::Run => {}
            }
            out.cost += cost;
            let logits = net.branch_forward(&mut tape, &mut binder, b, feature, &mut bn)?;
            out.trace.branches.push(b);
            out.exits.push(ExitLogits { exit: b + 1, logits: logits_of(&tape, logits) });
        }
    }

    let head = ledger.head_metric(metric);
    if decide(Step::Head, head, out.cost) != Verdict::Run {
        return Ok(out);
    }
    out.cost += head;
    let logits = net.head_forward(&mut tape, &mut binder, feature, &mut bn)?;
    out.trace.head = true;
    out.exits.push(ExitLogits { exit: net.branches.len() + 1, logits: logits_of(&tape, logits) });
    Ok(out)
}

fn finish(net: &Network, out: Outcome) -> Result<InferenceResult> {
    let last = out.exits.last().ok_or_else(|| Error::Config("inference produced no exit".into()))?;
    if last.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "inference logits" });
    }
    Ok(InferenceResult {
        prediction: argmax_rows(&last.logits, net.num_classes())[0],
        exit: last.exit,
        realized_cost: out.cost,
        skip_ratio: out.trace.skip_ratio(),
        trace: out.trace,
        exits: out.exits,
    })
}

/// Input-adaptive inference of one normalized sample through the final head.
/// The realized cost includes every gate that ran.
pub fn adaptive_infer(net: &Network, image: &Tensor, metric: &Metric) -> Result<InferenceResult> {
    let out = execute(net, image, metric, |step, _, _| match step {
        Step::Branch(_) => Verdict::Skip,
        _ => Verdict::Run,
    })?;
    finish(net, out)
}

/// Worst-case cost from just after branch `b` to the next exit: every gate
/// and every body in full, then the next branch or the head.
fn worst_to_next_exit(net: &Network, b: usize, metric: &Metric) -> f64 {
    let ledger = &net.ledger;
    let from = net.branches[b].after_unit + 1;
    let (to, exit_cost) = match net.branches.get(b + 1) {
        Some(next) => (next.after_unit + 1, ledger.branch_metric(b + 1, metric)),
        None => (net.units.len(), ledger.head_metric(metric)),
    };
    let units: f64 = (from..to)
        .map(|u| {
            let m = ledger.unit_metric(u, metric);
            let gates = if net.units[u].is_gated() { m.layer_gate + m.channel_gate } else { 0.0 };
            gates + m.layer_part + m.channel_part
        })
        .sum();
    units + exit_cost
}

/// Anytime inference of one normalized sample under a hard budget.
///
/// A step that would push the accumulated cost above the limit is never
/// started; the prediction then comes from the latest branch evaluated. With
/// an unbounded limit no branch is evaluated, since inference cannot halt.
pub fn budgeted_infer(net: &Network, image: &Tensor, budget: &Budget, policy: BranchPolicy) -> Result<InferenceResult> {
    let limit = budget.limit;
    let metric = &budget.metric;
    let worst: Vec<f64> = (0..net.branches.len()).map(|b| worst_to_next_exit(net, b, metric)).collect();
    let out = execute(net, image, metric, |step, cost, acc| {
        if let Step::Branch(b) = step {
            let needed = match policy {
                _ if limit.is_infinite() => false,
                BranchPolicy::Always => true,
                // slack guards the bound against summation-order rounding
                BranchPolicy::Opportunistic => acc + worst[b] * (1.0 + 1e-9) > limit,
            };
            if !needed {
                return Verdict::Skip;
            }
        }
        if acc + cost <= limit {
            Verdict::Run
        } else {
            Verdict::Halt
        }
    })?;
    if out.exits.is_empty() {
        return Err(Error::BudgetInfeasible { limit, min_budget: first_exit_cost(net, image, metric)? });
    }
    finish(net, out)
}

/// Cost of reaching and evaluating the first exit on this sample's path.
pub fn first_exit_cost(net: &Network, image: &Tensor, metric: &Metric) -> Result<f64> {
    let mut reached = None;
    execute(net, image, metric, |step, cost, acc| {
        if reached.is_some() {
            return Verdict::Halt;
        }
        if matches!(step, Step::Branch(_) | Step::Head) {
            reached = Some(acc + cost);
        }
        Verdict::Run
    })?;
    reached.ok_or_else(|| Error::Config("network has no exit".into()))
}

/// A budget grid from a fraction of the first-exit cost of a fully open
/// path up to the cost of running everything, branches included.
pub fn budget_grid(net: &Network, metric: &Metric, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::Config("a budget grid needs at least two points".into()));
    }
    let ledger = &net.ledger;
    let full = metric.of(&(ledger.static_total() + ledger.gate_overhead()))
        + (0..net.branches.len()).map(|b| ledger.branch_metric(b, metric)).sum::<f64>();
    let first = match net.branches.first() {
        Some(b) => {
            ledger.stem_metric(metric)
                + (0..=b.after_unit).map(|u| ledger.body_metric(u, 1.0, metric)).sum::<f64>()
                + ledger.branch_metric(0, metric)
        }
        None => full,
    };
    let lo = 0.8 * first;
    let hi = 1.05 * full;
    Ok((0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect())
}
