//! Layer operations against independent oracles and finite differences.

use ddi::numerics::ops::sigmoid;
use ddi::numerics::{
    finite_difference_check, lstm_cell, BnMode, LstmState, LstmVars, ParamGroup, ParamStore, Tape, Tensor,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct nested-loop convolution, written independently of the engine.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.at(&[b, ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

fn int_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-4i32..=4) as f32)
}

fn conv_once<T: ddi::numerics::Real>(x: Tensor<T>, w: Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let mut tape = Tape::<T>::inference();
    let xv = tape.constant(x);
    let wv = tape.constant(w);
    let y = tape.conv2d(xv, wv, stride, pad).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_sum_of_ones() {
    let y = conv_once(Tensor::<f32>::full(&[1, 1, 3, 3], 1.0), Tensor::full(&[1, 1, 3, 3], 1.0), 1, 0);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv_ramp_diagonal_kernel_stride_two() {
    let x = Tensor::<f32>::from_fn(&[1, 1, 4, 4], |i| i as f32);
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = conv_once(x.clone(), w.clone(), 2, 0);
    let oracle = naive_conv(&x.cast(), &w.cast(), 2, 0);
    // x[0,0]+x[1,1], x[0,2]+x[1,3], x[2,0]+x[3,1], x[2,2]+x[3,3]
    assert_eq!(oracle.data(), &[5.0, 9.0, 21.0, 25.0]);
    assert_eq!(y.cast::<f64>(), oracle);
}

#[test]
fn conv_zero_kernel_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 3, 5, 5], &mut rng, 1.0);
    let y = conv_once(x, Tensor::zeros(&[4, 3, 3, 3]), 1, 1);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_naive_oracle_bitwise_on_integers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(n, c, h, w, o, k, s, p) in &[
        (2, 3, 7, 6, 4, 3, 1, 1),
        (1, 2, 8, 8, 3, 3, 2, 1),
        (3, 4, 5, 5, 2, 1, 1, 0),
        (1, 5, 9, 7, 6, 1, 2, 0),
        (2, 1, 6, 6, 2, 2, 2, 0),
        (1, 3, 4, 4, 2, 3, 1, 2),
    ] {
        let x = int_tensor(&[n, c, h, w], &mut rng);
        let wt = int_tensor(&[o, c, k, k], &mut rng);
        let y = conv_once(x.clone(), wt.clone(), s, p);
        let oracle = naive_conv(&x.cast(), &wt.cast(), s, p);
        assert_eq!(y.cast::<f64>(), oracle, "case {:?}", (n, c, h, w, o, k, s, p));
    }
}

#[test]
fn conv_float_inputs_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 9, 9], &mut rng, 1.0);
    let w = rand_tensor(&[5, 3, 3, 3], &mut rng, 1.0);
    let y = conv_once(x.cast::<f32>(), w.cast::<f32>(), 2, 1);
    let oracle = naive_conv(&x.cast::<f32>().cast(), &w.cast::<f32>().cast(), 2, 1);
    assert!(y.cast::<f64>().max_abs_diff(&oracle) < 1e-5);
}

#[test]
fn conv_shape_mismatch_names_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let err = tape.conv2d(x, w, 1, 0).unwrap_err().to_string();
    assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 2, 3, 3]"), "{}", err);
}

#[test]
fn fully_connected_cases() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.5]).unwrap());
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zb = tape.constant(Tensor::zeros(&[3]));
    let y = tape.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.5]);

    let x = tape.constant(Tensor::new(vec![1, 1], vec![5.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![1], vec![3.0]).unwrap());
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[13.0]);

    let bad = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.linear(x, bad, None).is_err());
}

#[test]
fn fully_connected_against_hand_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[2, 4], &mut rng, 1.0);
    let w = rand_tensor(&[3, 4], &mut rng, 1.0);
    let b = rand_tensor(&[3], &mut rng, 1.0);
    let mut tape = Tape::<f64>::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    for i in 0..2 {
        for o in 0..3 {
            let mut s = b.data()[o];
            for k in 0..4 {
                s += x.at(&[i, k]) * w.at(&[o, k]);
            }
            assert!((tape.value(y).at(&[i, o]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn pooling_cases() {
    let mut tape = Tape::<f32>::new();
    let c = tape.constant(Tensor::full(&[1, 1, 5, 5], 7.0));
    let g = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.value(g).data(), &[7.0]);

    let m = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mp = tape.max_pool2d(m, 2, 2).unwrap();
    assert_eq!(tape.value(mp).data(), &[4.0]);

    let ramp = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32));
    let ap = tape.avg_pool2d(ramp, 2, 2).unwrap();
    // (0+1+4+5)/4, (2+3+6+7)/4, (8+9+12+13)/4, (10+11+14+15)/4
    assert_eq!(tape.value(ap).data(), &[2.5, 4.5, 10.5, 12.5]);

    assert!(tape.max_pool2d(m, 3, 1).is_err());
}

#[test]
fn max_pool_gradient_goes_to_first_maximum() {
    let mut store = ParamStore::new();
    let id = store.add("x", ParamGroup::Backbone, Tensor::new(vec![1, 1, 2, 2], vec![3.0, 3.0, 1.0, 3.0]).unwrap()).unwrap();
    let mut tape = Tape::<f32>::new();
    let mut b = ddi::numerics::Binder::new(&store, &[ParamGroup::Backbone]);
    let x = b.bind(&mut tape, id);
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn batchnorm_eval_identity_and_train_constant() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f32 * 0.5 - 2.0));
    let gamma = tape.constant(Tensor::full(&[2], 1.0));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Eval { mean: vec![0.0; 2], var: vec![1.0; 2] }).unwrap();
    assert!(stats.is_none());
    assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-4);

    let cst = tape.constant(Tensor::full(&[3, 1, 2, 2], 4.0));
    let g1 = tape.constant(Tensor::full(&[1], 2.0));
    let b1 = tape.constant(Tensor::full(&[1], 0.75));
    let (y, stats) = tape.batch_norm(cst, g1, b1, BnMode::Train).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    assert_eq!(stats.unwrap().mean, vec![4.0]);

    let empty = tape.constant(Tensor::zeros(&[0, 1, 2, 2]));
    assert!(tape.batch_norm(empty, g1, b1, BnMode::Train).is_err());
}

#[test]
fn batchnorm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", ParamGroup::Backbone, rand_tensor(&[2, 3, 2, 2], &mut rng, 1.0).cast()).unwrap();
    let g = store.add("g", ParamGroup::Backbone, rand_tensor(&[3], &mut rng, 1.0).cast()).unwrap();
    let b = store.add("b", ParamGroup::Backbone, rand_tensor(&[3], &mut rng, 1.0).cast()).unwrap();
    let r = rand_tensor(&[2, 3, 2, 2], &mut rng, 1.0);
    for mode in [BnMode::Train, BnMode::Eval { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] }] {
        let report = finite_difference_check(&store, &[ParamGroup::Backbone], 1e-5, 60, 9, |tape, binder| {
            let (xv, gv, bv) = (binder.bind(tape, x), binder.bind(tape, g), binder.bind(tape, b));
            let (y, _) = tape.batch_norm(xv, gv, bv, mode.clone())?;
            let rv = tape.constant(r.clone());
            let yr = tape.mul(y, rv)?;
            let t = tape.tanh(yr)?;
            tape.sum_all(t)
        })
        .unwrap();
        assert!(report.passed(1e-3), "{:?}", report);
    }
}

#[test]
fn every_layer_op_matches_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let x = store.add("x", ParamGroup::Backbone, rand_tensor(&[2, 2, 6, 6], &mut rng, 1.0).cast()).unwrap();
        let w = store.add("w", ParamGroup::Backbone, rand_tensor(&[3, 2, 3, 3], &mut rng, 0.5).cast()).unwrap();
        let fw = store.add("fw", ParamGroup::Backbone, rand_tensor(&[4, 3], &mut rng, 0.5).cast()).unwrap();
        let fb = store.add("fb", ParamGroup::Backbone, rand_tensor(&[4], &mut rng, 0.5).cast()).unwrap();
        let gate = store.add("gate", ParamGroup::Gate, rand_tensor(&[2, 3], &mut rng, 1.0).cast()).unwrap();
        let labels = [1usize, 3];
        let report = finite_difference_check(&store, &[ParamGroup::Backbone, ParamGroup::Gate], 1e-5, 200, seed, |t, b| {
            let (xv, wv) = (b.bind(t, x), b.bind(t, w));
            let y = t.conv2d(xv, wv, 1, 1)?; // [2,3,6,6]
            let y2 = t.conv2d(xv, wv, 2, 1)?; // [2,3,3,3]
            let g = b.bind(t, gate);
            let gs = t.sigmoid(g)?;
            let p = t.max_pool2d(y, 2, 2)?; // [2,3,3,3]
            let a = t.avg_pool2d(y, 2, 2)?;
            let s = t.slice_channels(y, 0, 3)?;
            let sp = t.avg_pool2d(s, 2, 2)?;
            let cat = t.concat_channels(&[p, a])?;
            let half = t.slice_channels(cat, 3, 3)?;
            let sum = t.add(half, sp)?;
            let bl = t.blend_channels(sum, y2, gs)?;
            let r = t.relu(bl)?;
            let th = t.tanh(r)?;
            let pooled = t.global_avg_pool(th)?; // [2,3]
            let m = t.mean_cols(pooled)?; // [2,1]
            let scaled = t.mul_rows(pooled, m)?;
            let (fwv, fbv) = (b.bind(t, fw), b.bind(t, fb));
            let logits = t.linear(scaled, fwv, Some(fbv))?;
            t.softmax_cross_entropy(logits, &labels)
        })
        .unwrap();
        assert!(report.passed(1e-3) && report.coordinates >= 200, "seed {}: {:?}", seed, report);
    }
}

#[test]
fn fan_out_sums_gradients() {
    let mut store = ParamStore::new();
    let id = store.add("x", ParamGroup::Backbone, Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
    let grad_of = |twice: bool| {
        let mut tape = Tape::<f64>::new();
        let mut b = ddi::numerics::Binder::new(&store, &[ParamGroup::Backbone]);
        let x = b.bind(&mut tape, id);
        let f = tape.tanh(x).unwrap();
        let out = if twice {
            let f2 = tape.tanh(x).unwrap();
            tape.add(f, f2).unwrap()
        } else {
            f
        };
        let l = tape.sum_all(out).unwrap();
        tape.backward(l).unwrap().get(x).unwrap().clone()
    };
    let single = grad_of(false);
    let double = grad_of(true);
    for (a, b) in single.data().iter().zip(double.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::<f64>::new();
    let k = 5;
    let u = tape.constant(Tensor::zeros(&[2, k]));
    let l = tape.softmax_cross_entropy(u, &[0, 4]).unwrap();
    assert!((tape.value(l).item() - (k as f64).ln()).abs() < 1e-12);

    let sat = tape.constant(Tensor::new(vec![1, 3], vec![80.0, 0.0, 0.0]).unwrap());
    let l = tape.softmax_cross_entropy(sat, &[0]).unwrap();
    assert!(tape.value(l).item() < 1e-30);

    let logits = [0.2, -1.3, 0.7];
    let v = tape.constant(Tensor::new(vec![1, 3], logits.to_vec()).unwrap());
    let l = tape.softmax_cross_entropy(v, &[2]).unwrap();
    let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
    assert!((tape.value(l).item() - (-(logits[2].exp() / z).ln())).abs() < 1e-12);

    assert!(tape.softmax_cross_entropy(v, &[3]).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut store = ParamStore::new();
    let id = store.add("z", ParamGroup::Backbone, Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 2.0, 0.0, 1.0]).unwrap()).unwrap();
    let mut tape = Tape::<f64>::new();
    let mut b = ddi::numerics::Binder::new(&store, &[ParamGroup::Backbone]);
    let z = b.bind(&mut tape, id);
    let l = tape.softmax_cross_entropy(z, &[1, 0]).unwrap();
    let g = tape.backward(l).unwrap();
    let zv = tape.value(z).data().to_vec();
    let probs = ddi::numerics::ops::softmax_rows(&zv, 3);
    let labels = [1, 0];
    for i in 0..2 {
        for k in 0..3 {
            let expect = (probs[i * 3 + k] - if labels[i] == k { 1.0 } else { 0.0 }) / 2.0;
            assert!((g.get(z).unwrap().at(&[i, k]) - expect).abs() < 1e-12);
        }
    }
}

/// Scalar-loop LSTM cell with gate order i, f, g, o.
fn lstm_oracle(x: &[f64], h: &[f64], c: &[f64], w_ih: &Tensor<f64>, w_hh: &Tensor<f64>, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let pre = |row: usize| {
        let mut s = b[row];
        for (k, &xv) in x.iter().enumerate() {
            s += w_ih.at(&[row, k]) * xv;
        }
        for (k, &hv) in h.iter().enumerate() {
            s += w_hh.at(&[row, k]) * hv;
        }
        s
    };
    let mut h2 = vec![0.0; hid];
    let mut c2 = vec![0.0; hid];
    for j in 0..hid {
        let i = sig(pre(j));
        let f = sig(pre(hid + j));
        let g = pre(2 * hid + j).tanh();
        let o = sig(pre(3 * hid + j));
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

#[test]
fn lstm_zero_everything_gives_zero() {
    let mut tape = Tape::<f32>::new();
    let w = LstmVars {
        w_ih: tape.constant(Tensor::zeros(&[8, 3])),
        w_hh: tape.constant(Tensor::zeros(&[8, 2])),
        bias: tape.constant(Tensor::zeros(&[8])),
    };
    let state = LstmState { h: tape.constant(Tensor::zeros(&[1, 2])), c: tape.constant(Tensor::zeros(&[1, 2])) };
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let s = lstm_cell(&mut tape, &w, x, state).unwrap();
    assert!(tape.value(s.h).data().iter().all(|&v| v == 0.0));
    // sigmoid(0) * tanh(0)
    assert_eq!(sigmoid(0.0f32) * 0.0f32.tanh(), 0.0);
}

#[test]
fn lstm_step_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (inp, hid) = (4, 3);
    let w_ih = rand_tensor(&[4 * hid, inp], &mut rng, 0.3);
    let w_hh = rand_tensor(&[4 * hid, hid], &mut rng, 0.3);
    let b = rand_tensor(&[4 * hid], &mut rng, 0.3);
    let x = rand_tensor(&[1, inp], &mut rng, 1.0);
    let h0 = rand_tensor(&[1, hid], &mut rng, 0.5);
    let c0 = rand_tensor(&[1, hid], &mut rng, 0.5);
    let mut tape = Tape::<f64>::new();
    let w = LstmVars { w_ih: tape.constant(w_ih.clone()), w_hh: tape.constant(w_hh.clone()), bias: tape.constant(b.clone()) };
    let state = LstmState { h: tape.constant(h0.clone()), c: tape.constant(c0.clone()) };
    let xv = tape.constant(x.clone());
    let s = lstm_cell(&mut tape, &w, xv, state).unwrap();
    let (h_or, c_or) = lstm_oracle(x.data(), h0.data(), c0.data(), &w_ih, &w_hh, b.data());
    for j in 0..hid {
        assert!((tape.value(s.h).data()[j] - h_or[j]).abs() < 1e-12);
        assert!((tape.value(s.c).data()[j] - c_or[j]).abs() < 1e-12);
    }
    let bad = LstmState { h: tape.constant(Tensor::zeros(&[1, hid + 1])), c: tape.constant(Tensor::zeros(&[1, hid + 1])) };
    assert!(lstm_cell(&mut tape, &w, xv, bad).is_err());
}

#[test]
fn lstm_two_step_unroll_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (inp, hid) = (3, 4);
    let mut store = ParamStore::new();
    let wi = store.add("wi", ParamGroup::Gate, rand_tensor(&[4 * hid, inp], &mut rng, 0.5).cast()).unwrap();
    let wh = store.add("wh", ParamGroup::Gate, rand_tensor(&[4 * hid, hid], &mut rng, 0.5).cast()).unwrap();
    let bb = store.add("b", ParamGroup::Gate, rand_tensor(&[4 * hid], &mut rng, 0.5).cast()).unwrap();
    let x1 = rand_tensor(&[2, inp], &mut rng, 1.0);
    let x2 = rand_tensor(&[2, inp], &mut rng, 1.0);
    let report = finite_difference_check(&store, &[ParamGroup::Gate], 1e-5, 80, 3, |t, b| {
        let w = LstmVars { w_ih: b.bind(t, wi), w_hh: b.bind(t, wh), bias: b.bind(t, bb) };
        let s0 = LstmState { h: t.constant(Tensor::zeros(&[2, hid])), c: t.constant(Tensor::zeros(&[2, hid])) };
        let a = t.constant(x1.clone());
        let s1 = lstm_cell(t, &w, a, s0)?;
        let c = t.constant(x2.clone());
        let s2 = lstm_cell(t, &w, c, s1)?;
        t.sum_all(s2.h)
    })
    .unwrap();
    assert!(report.passed(1e-3), "{:?}", report);
}

#[test]
fn non_finite_outputs_are_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1], f32::MAX));
    let err = tape.affine(x, 10.0, 0.0).unwrap_err();
    assert!(matches!(err, ddi::Error::NonFinite { .. }));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[2, 3, 8, 8], &mut rng, 1.0).cast::<f32>();
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng, 1.0).cast::<f32>();
        let y = conv_once(x, w, 1, 1);
        y.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()
    };
    assert_eq!(run(), run());
}
