#![allow(dead_code)]

use ddi::backbone::Network;
use ddi::numerics::Tensor;

/// Forces every layer gate of `net` to a fixed decision per gated unit.
///
/// The reduction bias of each unit drives the LSTM cell input to ±1 while
/// the input and output gates saturate open and the forget gate closed, so
/// the hidden state carries only the current unit's sign. A large projection
/// weight then saturates the sigmoid.
pub fn force_layer_gates(net: &mut Network, open: &[bool]) {
    let h = net.layer_gate.hidden;
    let r = net.layer_gate.reduce;
    let mut w_ih = Tensor::zeros(&[4 * h, r]);
    w_ih.data_mut()[2 * h * r] = 1.0;
    let mut bias = vec![0.0; 4 * h];
    for j in 0..h {
        bias[j] = 20.0;
        bias[h + j] = -20.0;
        bias[3 * h + j] = 20.0;
    }
    let lg = net.layer_gate.clone();
    net.store.set_value(lg.w_ih, w_ih).unwrap();
    net.store.set_value(lg.w_hh, Tensor::zeros(&[4 * h, h])).unwrap();
    net.store.set_value(lg.bias, Tensor::new(vec![4 * h], bias).unwrap()).unwrap();
    let mut proj = Tensor::zeros(&[1, h]);
    proj.data_mut()[0] = 100.0;
    net.store.set_value(lg.proj_w, proj).unwrap();
    net.store.set_value(lg.proj_b, Tensor::zeros(&[1])).unwrap();
    let gated: Vec<usize> = net.gated_units().collect();
    assert_eq!(gated.len(), open.len());
    for (&u, &o) in gated.iter().zip(open) {
        let g = net.units[u].gates.clone().unwrap().layer;
        let c = g.config.input_channels;
        net.store.set_value(g.reduce_w, Tensor::zeros(&[r, c])).unwrap();
        let mut b = vec![0.0; r];
        b[0] = if o { 10.0 } else { -10.0 };
        net.store.set_value(g.reduce_b, Tensor::new(vec![r], b).unwrap()).unwrap();
    }
}

/// Forces every channel gate to a fixed bit pattern per gated unit.
pub fn force_channel_gates(net: &mut Network, patterns: &[Vec<bool>]) {
    let gated: Vec<usize> = net.gated_units().collect();
    assert_eq!(gated.len(), patterns.len());
    for (&u, p) in gated.iter().zip(patterns) {
        let g = net.units[u].gates.clone().unwrap().channel;
        let k = g.config.out_channels;
        assert_eq!(p.len(), k);
        let width = net.store.get(g.fc_w).value.shape()[1];
        net.store.set_value(g.fc_w, Tensor::zeros(&[k, width])).unwrap();
        let b = p.iter().map(|&on| if on { 20.0 } else { -20.0 }).collect();
        net.store.set_value(g.fc_b, Tensor::new(vec![k], b).unwrap()).unwrap();
    }
}

pub fn all_channels_open(net: &Network) -> Vec<Vec<bool>> {
    net.gated_units().map(|u| vec![true; net.units[u].gated_channels()]).collect()
}

pub fn random_input(net: &Network, n: usize, seed: u64) -> Tensor {
    let [c, h, w] = net.input_shape();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(&[n, c, h, w], |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 33) as f64 / (1u64 << 31) as f64 * 2.0 - 1.0) as f32
    })
}
