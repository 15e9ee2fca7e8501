mod common;

use common::*;
use ddi::backbone::{ArchConfig, GateMode, Network};
use ddi::costmodel::{dynamic_cost, Metric};
use ddi::data::{synthetic_splits, Dataset, Normalization};
use ddi::numerics::Tensor;
use ddi::runtime::*;
use ddi::training::fit_normalization;
use ddi::Error;

/// Toy network whose gates make varied decisions from the start.
fn mixed_net() -> (Network, Dataset) {
    let mut arch = ArchConfig::preset("toy").unwrap();
    arch.gates.weight_std = 0.5;
    arch.gates.final_bias = 0.0;
    let mut net = Network::build(&arch, 21).unwrap();
    let (train, test) = synthetic_splits(100, 60, 3).unwrap();
    fit_normalization(&mut net, &train).unwrap();
    (net, test)
}

fn input(net: &Network, data: &Dataset, i: usize) -> Tensor {
    let (mean, std) = net.norm_stats();
    data.tensor(&[i], &Normalization { mean, std }).unwrap()
}

fn open_everything(net: &mut Network) {
    let gated = net.gated_units().count();
    force_layer_gates(net, &vec![true; gated]);
    let ch = all_channels_open(net);
    force_channel_gates(net, &ch);
}

#[test]
fn difficulty_thresholds() {
    assert_eq!(classify_skip_ratio(0.61), Category::Easy);
    assert_eq!(classify_skip_ratio(0.39), Category::Hard);
    assert_eq!(classify_skip_ratio(0.50), Category::Medium);
    assert_eq!(classify_skip_ratio(0.60), Category::Medium);
    assert_eq!(classify_skip_ratio(0.40), Category::Medium);
    assert_eq!(classify_skip_ratio(1.0), Category::Easy);
    assert_eq!(classify_skip_ratio(0.0), Category::Hard);
}

#[test]
fn budgets_are_validated() {
    assert!(Budget::new(Metric::Flops, 1.0).is_ok());
    assert!(Budget::unlimited(Metric::Flops).unwrap().limit.is_infinite());
    for bad in [0.0, -3.0, f64::NAN] {
        assert!(matches!(Budget::new(Metric::Flops, bad), Err(Error::Config(_))));
    }
    assert!(Budget::new(Metric::Uniform, 5.0).is_err());
}

#[test]
fn adaptive_cost_matches_the_cost_model() {
    let (net, data) = mixed_net();
    let mut skipped = 0.0;
    for i in 0..data.len() {
        let x = input(&net, &data, i);
        for metric in [Metric::Flops, Metric::Energy(Default::default())] {
            let r = adaptive_infer(&net, &x, &metric).unwrap();
            assert_eq!(r.realized_cost, dynamic_cost(&r.trace, &net.ledger, &metric).unwrap().total);
            assert!(r.trace.head && r.trace.branches.is_empty() && r.trace.halted.is_none());
            assert_eq!(r.exit, net.num_exits());
            assert_eq!(r.exits.len(), 1);
            assert_eq!(r, adaptive_infer(&net, &x, &metric).unwrap());
        }
        skipped += adaptive_infer(&net, &x, &Metric::Flops).unwrap().skip_ratio;
    }
    let mean = skipped / data.len() as f64;
    assert!(mean > 0.05 && mean < 0.95, "gates should make mixed decisions, mean skip {}", mean);
}

#[test]
fn adaptive_agrees_with_batched_hard_inference() {
    let (net, data) = mixed_net();
    let (mean, std) = net.norm_stats();
    let all: Vec<usize> = (0..data.len()).collect();
    let (logits, traces) = net.infer_batch(&data.tensor(&all, &Normalization { mean, std }).unwrap(), GateMode::Hard).unwrap();
    let head = logits.last().unwrap();
    let k = net.num_classes();
    for i in all {
        let r = adaptive_infer(&net, &input(&net, &data, i), &Metric::Flops).unwrap();
        assert_eq!(r.trace.units, traces[i].units, "sample {}", i);
        for (a, b) in r.exits[0].logits.iter().zip(&head.data()[i * k..(i + 1) * k]) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "sample {}: {} vs {}", i, a, b);
        }
    }
}

#[test]
fn saturated_open_gates_reproduce_the_base_network() {
    let (mut net, data) = mixed_net();
    open_everything(&mut net);
    let (mean, std) = net.norm_stats();
    let all: Vec<usize> = (0..data.len()).collect();
    let (base, _) = net.infer_batch(&data.tensor(&all, &Normalization { mean, std }).unwrap(), GateMode::Open).unwrap();
    let base = ddi::numerics::ops::argmax_rows(base.last().unwrap().data(), net.num_classes());
    for i in all {
        let r = adaptive_infer(&net, &input(&net, &data, i), &Metric::Flops).unwrap();
        assert_eq!(r.prediction, base[i]);
        assert_eq!(r.skip_ratio, 0.0);
        let l = &net.ledger;
        assert_eq!(r.realized_cost, dynamic_cost(&r.trace, l, &Metric::Flops).unwrap().total);
        assert!((r.realized_cost - (l.static_total().flops + l.gate_overhead().flops)).abs() <= 1e-9 * r.realized_cost);
    }
}

#[test]
fn closed_layers_pay_only_their_layer_gates() {
    let (mut net, data) = mixed_net();
    let gated = net.gated_units().count();
    force_layer_gates(&mut net, &vec![false; gated]);
    let r = adaptive_infer(&net, &input(&net, &data, 0), &Metric::Flops).unwrap();
    let l = &net.ledger;
    let expected = l.stem.flops
        + l.units.iter().map(|u| if u.gated { u.layer_gate.flops } else { u.body().flops }).sum::<f64>()
        + l.head.flops;
    assert!((r.realized_cost - expected).abs() <= 1e-9 * expected);
    assert_eq!(r.skip_ratio, 1.0);
    assert_eq!(classify_difficulty(&r), Category::Easy);
}

/// Cumulative cost through each branch and through the head with every gate open.
fn open_exit_costs(net: &Network, metric: &Metric) -> Vec<f64> {
    let l = &net.ledger;
    let mut acc = l.stem_metric(metric);
    let mut out = Vec::new();
    for (u, unit) in net.units.iter().enumerate() {
        let m = l.unit_metric(u, metric);
        acc += if unit.is_gated() { m.layer_gate + m.channel_gate } else { 0.0 } + m.layer_part + m.channel_part;
        for (b, br) in net.branches.iter().enumerate() {
            if br.after_unit == u {
                acc += l.branch_metric(b, metric);
                out.push(acc);
            }
        }
    }
    out.push(acc + l.head_metric(metric));
    out
}

#[test]
fn budgeted_exits_follow_the_limit() {
    let (mut net, data) = mixed_net();
    open_everything(&mut net);
    let x = input(&net, &data, 0);
    let m = Metric::Flops;
    let costs = open_exit_costs(&net, &m);
    assert_eq!(costs.len(), net.num_exits());

    let at = |limit: f64| budgeted_infer(&net, &x, &Budget::new(m, limit).unwrap(), BranchPolicy::Always);
    let unconstrained = at(costs.last().unwrap() * 1.01).unwrap();
    assert_eq!(unconstrained.exit, net.num_exits());
    assert_eq!(unconstrained.trace.branches, (0..net.branches.len()).collect::<Vec<_>>());

    let between = at(0.5 * (costs[0] + costs[1])).unwrap();
    assert_eq!(between.exit, 1);
    assert_eq!(between.exits.len(), 1);
    assert!(between.realized_cost <= 0.5 * (costs[0] + costs[1]));

    match at(0.9 * costs[0]) {
        Err(Error::BudgetInfeasible { limit, min_budget }) => {
            assert_eq!(limit, 0.9 * costs[0]);
            assert!((min_budget - costs[0]).abs() <= 1e-9 * costs[0]);
            assert_eq!(min_budget, first_exit_cost(&net, &x, &m).unwrap());
            assert_eq!(at(min_budget).unwrap().exit, 1);
        }
        other => panic!("expected an infeasible budget, got {:?}", other.map(|r| r.exit)),
    }
}

#[test]
fn sweeps_respect_the_budget_and_never_exit_earlier() {
    let (net, data) = mixed_net();
    for metric in [Metric::Flops, Metric::Energy(Default::default())] {
        let grid = budget_grid(&net, &metric, 20).unwrap();
        assert_eq!(grid.len(), 20);
        for i in 0..data.len() {
            let x = input(&net, &data, i);
            for policy in [BranchPolicy::Always, BranchPolicy::Opportunistic] {
                let mut last = 0;
                for &limit in &grid {
                    match budgeted_infer(&net, &x, &Budget::new(metric, limit).unwrap(), policy) {
                        Ok(r) => {
                            assert!(r.realized_cost <= limit);
                            assert_eq!(r.realized_cost, dynamic_cost(&r.trace, &net.ledger, &metric).unwrap().total);
                            assert!(r.exit >= last, "sample {} {:?}: exit {} after {}", i, policy, r.exit, last);
                            assert_eq!(r.exits.last().unwrap().exit, r.exit);
                            last = r.exit;
                        }
                        Err(Error::BudgetInfeasible { min_budget, .. }) => {
                            assert_eq!(last, 0);
                            assert!(min_budget > limit);
                        }
                        Err(e) => panic!("{}", e),
                    }
                }
                assert_eq!(last, net.num_exits(), "the top of the grid reaches the head");
            }
        }
        let idx: Vec<usize> = (0..20).collect();
        let sweep = budget_sweep(&net, &data, &idx, &metric, &grid, BranchPolicy::Always).unwrap();
        assert_eq!(sweep.points.len(), 20);
        assert_eq!(sweep.monotonicity_violations, 0);
        assert!(sweep.points.iter().all(|p| p.within_budget && p.max_cost <= p.limit));
        assert_eq!(sweep.points.last().unwrap().feasible, 20);
    }
}

#[test]
fn unlimited_budget_matches_adaptive_inference() {
    let (net, data) = mixed_net();
    for i in 0..data.len() {
        let x = input(&net, &data, i);
        let a = adaptive_infer(&net, &x, &Metric::Flops).unwrap();
        for policy in [BranchPolicy::Always, BranchPolicy::Opportunistic] {
            let b = budgeted_infer(&net, &x, &Budget::unlimited(Metric::Flops).unwrap(), policy).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn opportunistic_branches_run_only_when_needed() {
    let (mut net, data) = mixed_net();
    open_everything(&mut net);
    let x = input(&net, &data, 1);
    let costs = open_exit_costs(&net, &Metric::Flops);
    let no_branches = costs.last().unwrap() - (0..net.branches.len()).map(|b| net.ledger.branch_metric(b, &Metric::Flops)).sum::<f64>();
    let plenty = Budget::new(Metric::Flops, no_branches * 1.001).unwrap();
    let r = budgeted_infer(&net, &x, &plenty, BranchPolicy::Opportunistic).unwrap();
    assert!(r.trace.branches.is_empty());
    assert_eq!(r.exit, net.num_exits());
    let r = budgeted_infer(&net, &x, &plenty, BranchPolicy::Always).unwrap();
    assert!(r.exit < net.num_exits(), "always-evaluated branches consume the head's budget");
    let tight = Budget::new(Metric::Flops, costs[0] * 1.001).unwrap();
    let r = budgeted_infer(&net, &x, &tight, BranchPolicy::Opportunistic).unwrap();
    assert_eq!((r.exit, r.trace.branches.clone()), (1, vec![0]));
}

#[test]
fn skip_report_counts_block_executions() {
    let (net, data) = mixed_net();
    let rep = skip_pattern_report(&net, &data, &Metric::Flops).unwrap();
    assert_eq!(rep.blocks.len(), net.units.len());
    assert_eq!(rep.samples, data.len());
    let results: Vec<InferenceResult> = (0..data.len()).map(|i| adaptive_infer(&net, &input(&net, &data, i), &Metric::Flops).unwrap()).collect();
    for b in &rep.blocks {
        assert!((0.0..=1.0).contains(&b.frequency));
        if !b.gated {
            assert_eq!(b.frequency, 1.0);
            assert_eq!(b.channel_fraction, 1.0);
        }
        let bits = results.iter().filter(|r| r.trace.units[b.block_id].layer != Some(false)).count();
        assert_eq!(b.frequency, bits as f64 / data.len() as f64);
    }
    assert_eq!(rep.blocks.iter().filter(|b| b.first_of_stage).count(), 3);
    let mean_cost = results.iter().map(|r| r.realized_cost).sum::<f64>() / data.len() as f64;
    assert!((rep.mean_realized_cost - mean_cost).abs() <= 1e-9 * mean_cost);
    for (i, r) in results.iter().enumerate() {
        assert_eq!(rep.per_sample_skip[i], r.skip_ratio);
        let bucket = match classify_difficulty(r) {
            Category::Easy => &rep.easy,
            Category::Hard => &rep.hard,
            Category::Medium => &rep.medium,
        };
        assert!(bucket.contains(&i));
    }
    assert_eq!(rep.easy.len() + rep.medium.len() + rep.hard.len(), data.len());

    let csv = rep.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "block_id,name,stage,gated,first_of_stage,frequency,channel_fraction");
    assert_eq!(lines.count(), net.units.len());
    let s = rep.summary(Some(&data));
    assert!(s.ground_truth_easy_skip.is_some() && s.ground_truth_hard_skip.is_some());
    assert_eq!(s.easy_count + s.medium_count + s.hard_count, data.len());

    let empty = data.subset(&[]);
    assert!(matches!(skip_pattern_report(&net, &empty, &Metric::Flops), Err(Error::Data(_))));
}

#[test]
fn records_stream_as_json_lines() {
    let (net, data) = mixed_net();
    let rows: Vec<InferenceRecord> = (0..5)
        .map(|i| InferenceRecord::new(i, data.labels[i] as usize, &adaptive_infer(&net, &input(&net, &data, i), &Metric::Flops).unwrap()))
        .collect();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let back: Vec<InferenceRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, rows);
    let keys: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for k in ["sample_id", "pred", "label", "exit", "cost", "skip_ratio", "difficulty"] {
        assert!(keys.get(k).is_some(), "{}", k);
    }
}

#[test]
fn malformed_inputs_are_rejected() {
    let (net, _) = mixed_net();
    let bad = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(matches!(adaptive_infer(&net, &bad, &Metric::Flops), Err(Error::Shape { .. })));
}
