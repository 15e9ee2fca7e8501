mod common;

use common::*;
use ddi::backbone::*;
use ddi::costmodel::{dynamic_cost, Metric};
use ddi::numerics::{Binder, Checkpoint, ParamGroup, Tape, Tensor};
use ddi::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> Network {
    Network::build(&ArchConfig::preset("toy").unwrap(), 3).unwrap()
}

fn toy_dense() -> Network {
    Network::build(&ArchConfig::preset("toy-dense").unwrap(), 3).unwrap()
}

fn count_kind(net: &Network, f: impl Fn(&UnitKind) -> bool) -> usize {
    net.units.iter().filter(|u| f(&u.kind)).count()
}

#[test]
fn resnet_builders() {
    for (depth, per) in [(38, 6), (74, 12)] {
        let net = build_resnet(depth, 10, 0).unwrap();
        assert_eq!(net.units.len(), 3 * per);
        for s in 0..3 {
            assert_eq!(net.units.iter().filter(|u| u.stage == s).count(), per);
        }
        assert_eq!(net.gated_units().count(), 3 * per - 2);
        assert_eq!(net.branches.len(), 6);
    }
    assert!(build_resnet(40, 10, 0).is_err());
    let net = toy();
    assert_eq!(net.units.len(), 6);
    assert_eq!(net.branches.len(), 3);
    assert_eq!(net.warnings.len(), 3);
    assert!(net.branches.iter().all(|b| net.units[b.after_unit].name.ends_with("block1")));
}

#[test]
fn branch_positions_in_resnet38() {
    let net = build_resnet(38, 10, 0).unwrap();
    let names: Vec<&str> = net.branches.iter().map(|b| net.units[b.after_unit].name.as_str()).collect();
    assert_eq!(
        names,
        ["stage1.block2", "stage1.block5", "stage2.block2", "stage2.block5", "stage3.block2", "stage3.block5"]
    );
    // trunks pool twice in stage one, once in stage two, never in stage three
    let trunks: Vec<usize> = net.branches.iter().map(|b| b.trunk.len()).collect();
    assert_eq!(trunks, [2, 2, 1, 1, 0, 0]);
}

#[test]
fn densenet_builders() {
    let net = build_densenet(100, 12, 10, 0).unwrap();
    assert_eq!(count_kind(&net, |k| matches!(k, UnitKind::Dense { .. })), 48);
    assert_eq!(count_kind(&net, |k| matches!(k, UnitKind::Transition { .. })), 2);
    assert_eq!(net.gated_units().count(), 48);
    let net = toy_dense();
    assert_eq!(count_kind(&net, |k| matches!(k, UnitKind::Dense { .. })), 12);
    assert!(build_densenet(100, 0, 10, 0).is_err());
}

#[test]
fn gates_only_on_shape_preserving_units() {
    let mut net = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let transition = net.units.iter().find(|u| u.in_shape != u.out_shape).unwrap().clone();
    assert!(!transition.is_gated());
    let settings = net.arch.gates.clone();
    assert!(UnitGates::attach(&mut net.store, &transition, &settings, &mut rng).is_err());
    let dense = toy_dense();
    let t = dense.units.iter().find(|u| matches!(u.kind, UnitKind::Transition { .. })).unwrap().clone();
    let mut store = dense.store.clone();
    assert!(UnitGates::attach(&mut store, &t, &settings, &mut rng).is_err());
}

struct UnitRun {
    x: Tensor<f64>,
    y: Tensor<f64>,
    tape: Tape<f64>,
    xv: ddi::numerics::Var,
    yv: ddi::numerics::Var,
}

/// Input and plain block output of the first gated unit, in f64.
fn unit_run(net: &Network, seed: u64) -> UnitRun {
    let mut tape = Tape::<f64>::inference();
    let mut binder = Binder::new(&net.store, &[]);
    let input = tape.constant(random_input(net, 2, seed).cast());
    let mut bn = BnCtx::new(false);
    let xv = net.stem_forward(&mut tape, &mut binder, input, &mut bn).unwrap();
    let yv = net.unit_body(&mut tape, &mut binder, 0, xv, &mut bn).unwrap();
    UnitRun { x: tape.value(xv).clone(), y: tape.value(yv).clone(), tape, xv, yv }
}

#[test]
fn gated_block_reductions() {
    let net = toy();
    assert!(net.units[0].is_gated());
    let mut r = unit_run(&net, 1);
    let [n, c, h, w] = r.x.dims4("test").unwrap();
    let plane = h * w;
    let lvals = [0.3, 0.8];
    let cvals: Vec<f64> = (0..n * c).map(|i| (i as f64 * 0.13).fract()).collect();

    let combine = |r: &mut UnitRun, l: Vec<f64>, ch: Vec<f64>| {
        let lv = r.tape.constant(Tensor::new(vec![n, 1], l).unwrap());
        let cv = r.tape.constant(Tensor::new(vec![n, c], ch).unwrap());
        let out = mgl2s_combine(&mut r.tape, r.yv, r.xv, lv, cv).unwrap();
        r.tape.value(out).clone()
    };
    let (x, y) = (r.x.data().to_vec(), r.y.data().to_vec());

    // channel gates all one: layer skipping
    let out = combine(&mut r, lvals.to_vec(), vec![1.0; n * c]);
    for (i, &o) in out.data().iter().enumerate() {
        let l = lvals[i / (c * plane)];
        assert!((o - (l * y[i] + (1.0 - l) * x[i])).abs() <= 1e-6);
    }
    // layer gate one: channel skipping
    let out = combine(&mut r, vec![1.0; n], cvals.clone());
    for (i, &o) in out.data().iter().enumerate() {
        let g = cvals[i / plane];
        assert!((o - (g * y[i] + (1.0 - g) * x[i])).abs() <= 1e-6);
    }
    // both one: the plain block
    let out = combine(&mut r, vec![1.0; n], vec![1.0; n * c]);
    assert!(out.max_abs_diff(&r.y) <= 1e-6);
    // hard layer gate zero: identity, bitwise
    let out = combine(&mut r, vec![0.0; n], cvals.clone());
    assert_eq!(out.data(), r.x.data());
}

#[test]
fn single_channel_assembly() {
    let net = toy();
    let mut r = unit_run(&net, 2);
    let [n, c, h, w] = r.x.dims4("test").unwrap();
    let mut g = vec![0.0; n * c];
    for s in 0..n {
        g[s * c] = 1.0;
    }
    let lv = r.tape.constant(Tensor::full(&[n, 1], 1.0));
    let cv = r.tape.constant(Tensor::new(vec![n, c], g).unwrap());
    let out = mgl2s_combine(&mut r.tape, r.yv, r.xv, lv, cv).unwrap();
    let out = r.tape.value(out);
    // two-branch manual composition: channel 0 from the block, the rest from the input
    for s in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                let idx = (s * c + ch) * h * w + i;
                let expect = if ch == 0 { r.y.data()[idx] } else { r.x.data()[idx] };
                assert_eq!(out.data()[idx], expect);
            }
        }
    }
}

fn hard_pass(net: &Network, input: &Tensor) -> (Vec<Tensor>, ForwardPass<f32>, Tape<f32>) {
    let mut tape = Tape::<f32>::inference();
    let mut binder = Binder::new(&net.store, &[]);
    let x = tape.constant(input.clone());
    let pass = net.full_forward(&mut tape, &mut binder, x, &ForwardOptions::eval(GateMode::Hard)).unwrap();
    let logits = pass.exits.iter().map(|&e| tape.value(e).clone()).collect();
    (logits, pass, tape)
}

#[test]
fn closed_layer_gates_pass_features_through() {
    let mut net = toy();
    let gated: Vec<usize> = net.gated_units().collect();
    force_layer_gates(&mut net, &vec![false; gated.len()]);
    let input = random_input(&net, 3, 4);
    let (logits, pass, tape) = hard_pass(&net, &input);
    for t in &pass.traces {
        assert!(t.units.iter().filter(|u| u.gated).all(|u| u.layer == Some(false) && u.channels.is_none()));
    }
    // manual composition: gated units are identities
    let mut mt = Tape::<f32>::inference();
    let mut binder = Binder::new(&net.store, &[]);
    let mut bn = BnCtx::new(false);
    let x = mt.constant(input.clone());
    let mut f = net.stem_forward(&mut mt, &mut binder, x, &mut bn).unwrap();
    for (u, unit) in net.units.iter().enumerate() {
        if !unit.is_gated() {
            f = net.unit_body(&mut mt, &mut binder, u, f, &mut bn).unwrap();
        }
        assert_eq!(mt.value(f).data(), tape.value(pass.features[u]).data());
    }
    let head = net.head_forward(&mut mt, &mut binder, f, &mut bn).unwrap();
    assert_eq!(mt.value(head).data(), logits.last().unwrap().data());
}

#[test]
fn open_gates_match_base_network() {
    let mut net = toy();
    let n_gated = net.gated_units().count();
    force_layer_gates(&mut net, &vec![true; n_gated]);
    let open = all_channels_open(&net);
    force_channel_gates(&mut net, &open);
    let input = random_input(&net, 4, 5);
    let (hard, pass, _) = hard_pass(&net, &input);
    let (base, _) = net.infer_batch(&input, GateMode::Open).unwrap();
    assert_eq!(hard.len(), net.num_exits());
    for (a, b) in hard.iter().zip(&base) {
        assert!(a.max_abs_diff(b) <= 1e-5);
    }
    for t in &pass.traces {
        assert_eq!(t.units.len(), net.units.len());
        assert_eq!(t.units.iter().filter(|u| u.gated).count(), n_gated);
        assert_eq!(t.skip_ratio(), 0.0);
    }
}

#[test]
fn dense_fallback_semantics() {
    let mut net = toy_dense();
    let gated: Vec<usize> = net.gated_units().collect();
    let g = net.arch.growth;
    // block 1: layer 1 open, layer 2 skipped; block 2: layers 1 and 2 skipped
    let mut pattern = vec![true; gated.len()];
    pattern[1] = false;
    pattern[4] = false;
    pattern[5] = false;
    force_layer_gates(&mut net, &pattern);
    let input = random_input(&net, 2, 8);
    let (_, pass, tape) = hard_pass(&net, &input);
    let last_slice = |u: usize| {
        let t = tape.value(pass.features[u]);
        let [n, c, h, w] = t.dims4("test").unwrap();
        let plane = h * w;
        (0..n).flat_map(|s| t.data()[(s * c + c - g) * plane..(s * c + c) * plane].to_vec()).collect::<Vec<f32>>()
    };
    assert_eq!(last_slice(gated[1]), last_slice(gated[0]));
    // block 2 starts after the transition; its skipped layers copy the entry slice
    let trans = net.units.iter().position(|u| matches!(u.kind, UnitKind::Transition { .. })).unwrap();
    assert_eq!(gated[4], trans + 1);
    assert_eq!(last_slice(gated[4]), last_slice(trans));
    assert_eq!(last_slice(gated[5]), last_slice(trans));
    assert_ne!(last_slice(gated[6]), last_slice(trans));
}

#[test]
fn realized_flops_match_hand_sum() {
    let mut net = toy();
    let gated: Vec<usize> = net.gated_units().collect();
    force_layer_gates(&mut net, &[true, false, true, true]);
    let mut ch = all_channels_open(&net);
    for b in ch[0].iter_mut().step_by(2) {
        *b = false;
    }
    ch[3][0] = false;
    force_channel_gates(&mut net, &ch);
    let input = random_input(&net, 1, 2);
    let (_, pass, _) = hard_pass(&net, &input);
    let trace = &pass.traces[0];
    let realized = dynamic_cost(trace, &net.ledger, &Metric::Flops).unwrap().total;

    // toy: 1→8 stem on 16², widths 8/16/32 on 16², 8², 4²
    let conv = |cin: f64, cout: f64, k: f64, s: f64| 2.0 * cin * cout * k * k * s * s;
    let pool = |c: f64, s: f64| c * s * s;
    let fc = |a: f64, b: f64| 2.0 * a * b;
    let lgate = |c: f64, s: f64| pool(c, s) + fc(c, 10.0) + fc(10.0, 40.0) + fc(10.0, 40.0) + fc(10.0, 1.0);
    let cgate = |c: f64, s: f64| conv(c, c, 3.0, s / 2.0) + pool(c, s / 2.0) + fc(c, c);
    let stem = conv(1.0, 8.0, 3.0, 16.0);
    let u0 = lgate(8.0, 16.0) + cgate(8.0, 16.0) + conv(8.0, 8.0, 3.0, 16.0) + 0.5 * conv(8.0, 8.0, 3.0, 16.0);
    let u1 = lgate(8.0, 16.0);
    let u2 = conv(8.0, 16.0, 3.0, 8.0) + conv(8.0, 16.0, 1.0, 8.0) + conv(16.0, 16.0, 3.0, 8.0);
    let u3 = lgate(16.0, 8.0) + cgate(16.0, 8.0) + 2.0 * conv(16.0, 16.0, 3.0, 8.0);
    let u4 = conv(16.0, 32.0, 3.0, 4.0) + conv(16.0, 32.0, 1.0, 4.0) + conv(32.0, 32.0, 3.0, 4.0);
    let u5 = lgate(32.0, 4.0) + cgate(32.0, 4.0) + conv(32.0, 32.0, 3.0, 4.0) + (31.0 / 32.0) * conv(32.0, 32.0, 3.0, 4.0);
    // branches after units 0, 2, 4 with 2, 1, 0 pool+conv stages
    let b0 = pool(8.0, 16.0) + conv(8.0, 8.0, 3.0, 8.0) + pool(8.0, 8.0) + conv(8.0, 8.0, 3.0, 4.0) + pool(8.0, 4.0) + fc(8.0, 2.0);
    let b1 = pool(16.0, 8.0) + conv(16.0, 16.0, 3.0, 4.0) + pool(16.0, 4.0) + fc(16.0, 2.0);
    let b2 = pool(32.0, 4.0) + fc(32.0, 2.0);
    let head = pool(32.0, 4.0) + fc(32.0, 2.0);
    let hand = stem + u0 + u1 + u2 + u3 + u4 + u5 + b0 + b1 + b2 + head;
    assert_eq!(gated, vec![0, 1, 3, 5]);
    assert!((realized - hand).abs() <= 1e-9 * hand, "{} vs {}", realized, hand);
}

#[test]
fn cumulative_cost_increases_across_exits() {
    for net in [toy(), toy_dense(), build_resnet(38, 10, 0).unwrap()] {
        let l = &net.ledger;
        let mut cum = l.stem.flops;
        let mut at_exit = Vec::new();
        let mut b = 0;
        for (i, u) in l.units.iter().enumerate() {
            cum += (u.body() + u.layer_gate + u.channel_gate).flops;
            while b < l.branches.len() && l.branches[b].after_unit == i {
                cum += l.branches[b].cost.flops;
                at_exit.push(cum);
                b += 1;
            }
        }
        at_exit.push(cum + l.head.flops);
        assert!(at_exit.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_logits() {
    let net = toy();
    let input = random_input(&net, 2, 3);
    let (a, _) = net.infer_batch(&input, GateMode::Hard).unwrap();
    let bytes = net.checkpoint(true).unwrap().to_bytes();
    let back = Network::from_checkpoint(&Checkpoint::read_from(bytes.as_slice()).unwrap()).unwrap();
    let (b, _) = back.infer_batch(&input, GateMode::Hard).unwrap();
    assert_eq!(a, b);

    let mut other = Network::build(&ArchConfig::preset("toy-dense").unwrap(), 0).unwrap();
    assert!(net.checkpoint(false).unwrap().load_into(&mut other.store).is_err());
}

#[test]
fn soft_mode_trains_gates_and_backbone() {
    let net = toy();
    let input = random_input(&net, 4, 1);
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(&net.store, &[ParamGroup::Backbone, ParamGroup::Gate]);
    let x = tape.constant(input);
    let pass = net.full_forward(&mut tape, &mut binder, x, &ForwardOptions::train(GateMode::Soft, false)).unwrap();
    assert_eq!(pass.exits.len(), 1);
    let loss = tape.softmax_cross_entropy(pass.head(), &[0, 1, 0, 1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let collected = binder.collect(&grads);
    let nonzero = |group: ParamGroup| {
        collected
            .iter()
            .filter(|(id, _)| net.store.get(*id).group == group)
            .any(|(_, g)| g.data().iter().any(|&v| v != 0.0))
    };
    assert!(nonzero(ParamGroup::Gate));
    assert!(nonzero(ParamGroup::Backbone));
    assert!(!pass.bn_updates.is_empty());
}

#[test]
fn hard_gates_on_gradient_tape_are_rejected() {
    let net = toy();
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(&net.store, &[ParamGroup::Gate]);
    let x = tape.constant(random_input(&net, 1, 0));
    let err = net.full_forward(&mut tape, &mut binder, x, &ForwardOptions::eval(GateMode::Hard)).unwrap_err();
    assert!(matches!(err, Error::NonDifferentiable(_)));
}

#[test]
fn input_shape_is_checked() {
    let net = toy();
    assert!(net.infer_batch(&Tensor::zeros(&[1, 3, 16, 16]), GateMode::Hard).is_err());
}

#[test]
fn same_seed_same_bytes() {
    let a = toy();
    let b = toy();
    assert_eq!(a.checkpoint(false).unwrap().to_bytes(), b.checkpoint(false).unwrap().to_bytes());
    let input = random_input(&a, 3, 9);
    assert_eq!(a.infer_batch(&input, GateMode::Hard).unwrap(), b.infer_batch(&input, GateMode::Hard).unwrap());
}

#[test]
fn running_stats_follow_momentum() {
    let mut net = toy();
    let mut tape = Tape::<f32>::new();
    let pass = {
        let mut binder = Binder::new(&net.store, &[ParamGroup::Backbone]);
        let x = tape.constant(random_input(&net, 4, 2));
        net.full_forward(&mut tape, &mut binder, x, &ForwardOptions::train(GateMode::Open, false)).unwrap()
    };
    let first = pass.bn_updates[0].clone();
    net.apply_bn_updates(&pass.bn_updates);
    let m = net.store.get(first.mean).value.data().to_vec();
    for (r, b) in m.iter().zip(&first.stats.mean) {
        assert!((r - 0.1 * b).abs() <= 1e-6);
    }
}

#[test]
fn gated_network_gradients_match_finite_differences() {
    use ddi::costmodel::expected_cost;
    use ddi::numerics::finite_difference_check;

    let mut arch = ArchConfig::resnet_custom(vec![2], vec![4], 1, 8, 3);
    arch.branches.enabled = false;
    // gate weights large enough that gradients clear the difference noise floor
    arch.gates.weight_std = 0.3;
    arch.gates.hidden_std = 0.3;
    arch.gates.final_bias = 0.0;
    for seed in [11, 12, 13] {
        let net = Network::build(&arch, seed).unwrap();
        assert_eq!(net.gated_units().count(), 2);
        let groups = [ParamGroup::Backbone, ParamGroup::Gate];
        assert!(net.store.num_scalars(&groups) <= 5000, "{}", net.store.num_scalars(&groups));
        let input: Tensor<f64> = random_input(&net, 3, seed).cast();
        let report = finite_difference_check(&net.store, &groups, 1e-5, 200, seed, |tape, binder| {
            let x = tape.constant(input.clone());
            let pass = net.full_forward(tape, binder, x, &ForwardOptions::train(GateMode::Soft, false))?;
            let ce = tape.softmax_cross_entropy(pass.head(), &[0, 1, 2])?;
            let e = expected_cost(tape, &pass.soft_gates, &net.ledger, &Metric::Uniform)?;
            let e = tape.affine(e, 0.3, 0.0)?;
            tape.add(ce, e)
        })
        .unwrap();
        assert!(report.coordinates >= 200);
        assert!(report.passed(1e-3), "seed {}: {:?}", seed, report);
    }
}
