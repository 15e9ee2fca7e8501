//! Layer gates (a recurrent controller shared by all gated blocks) and
//! channel gates (a small convolutional controller per block).
//!
//! Both produce sigmoid outputs. Training multiplies features by these soft
//! values; inference binarizes them at 0.5.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{self, ConvDims, LayerCost, Tiling};
use crate::error::{Error, Result};
use crate::numerics::params::gaussian;
use crate::numerics::{lstm_cell, Binder, LstmState, LstmVars, ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const THRESHOLD: f32 = 0.5;

pub fn binarize(soft: f32) -> bool {
    soft >= THRESHOLD
}

pub fn binarize_all(soft: &[f32]) -> Vec<bool> {
    soft.iter().map(|&s| binarize(s)).collect()
}

/// Soft gate output and its binarization; one element for a layer gate,
/// `k` for a channel gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub soft: Vec<f32>,
    pub hard: Vec<bool>,
}

impl GateDecision {
    pub fn new(soft: Vec<f32>) -> Result<Self> {
        if let Some(bad) = soft.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("gate value {} outside [0, 1]", bad)));
        }
        let hard = binarize_all(&soft);
        Ok(GateDecision { soft, hard })
    }

    pub fn arity(&self) -> usize {
        self.soft.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.soft.len() == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGateConfig {
    pub input_channels: usize,
    /// Width of the 1×1 reduction feeding the LSTM.
    pub reduce: usize,
    pub hidden: usize,
}

impl LayerGateConfig {
    pub fn new(input_channels: usize) -> Self {
        LayerGateConfig { input_channels, reduce: 10, hidden: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelGateVariant {
    /// 3×3 stride-2 conv `c→c`, ReLU, global pool, FC `c→k`.
    ResNet,
    /// 1×1 stride-2 conv `c→2g`, ReLU, 3×3 conv `2g→g`, ReLU, global pool, FC `g→k`.
    DenseNet { growth: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGateConfig {
    pub variant: ChannelGateVariant,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ChannelGateConfig {
    fn check(&self) -> Result<()> {
        let growth = match self.variant {
            ChannelGateVariant::DenseNet { growth } => growth,
            ChannelGateVariant::ResNet => 1,
        };
        if self.in_channels == 0 || self.out_channels == 0 || growth == 0 {
            return Err(Error::Config(format!("degenerate channel gate {:?}", self)));
        }
        Ok(())
    }

    /// `(cin, cout, kernel, stride, pad)` of each conv in the trunk.
    fn convs(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        match self.variant {
            ChannelGateVariant::ResNet => vec![(self.in_channels, self.in_channels, 3, 2, 1)],
            ChannelGateVariant::DenseNet { growth } => {
                vec![(self.in_channels, 2 * growth, 1, 2, 0), (2 * growth, growth, 3, 1, 1)]
            }
        }
    }

    fn trunk_width(&self) -> usize {
        self.convs().last().map(|c| c.1).unwrap_or(self.in_channels)
    }
}

/// Initialization of gate weights: Gaussian weights and a positive final
/// bias so gates start mostly open.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateInit {
    /// Std of the final gate layers (layer-gate projection, channel-gate FC).
    pub weight_std: f64,
    /// Std of the internal gate layers (reduction, LSTM, channel-gate convs).
    pub hidden_std: f64,
    pub final_bias: f32,
}

impl Default for GateInit {
    fn default() -> Self {
        GateInit { weight_std: 0.01, hidden_std: 0.01, final_bias: 2.0 }
    }
}

/// LSTM and output projection shared by every layer gate of a network.
#[derive(Clone, Debug)]
pub struct SharedLayerGate {
    pub reduce: usize,
    pub hidden: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl SharedLayerGate {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        reduce: usize,
        hidden: usize,
        init: &GateInit,
        rng: &mut R,
    ) -> Result<Self> {
        let s = init.weight_std;
        let h = init.hidden_std;
        let g = ParamGroup::Gate;
        Ok(SharedLayerGate {
            reduce,
            hidden,
            w_ih: store.add("gate.layer.lstm.w_ih", g, gaussian(&[4 * hidden, reduce], h, rng))?,
            w_hh: store.add("gate.layer.lstm.w_hh", g, gaussian(&[4 * hidden, hidden], h, rng))?,
            bias: store.add("gate.layer.lstm.bias", g, Tensor::zeros(&[4 * hidden]))?,
            proj_w: store.add("gate.layer.proj.weight", g, gaussian(&[1, hidden], s, rng))?,
            proj_b: store.add("gate.layer.proj.bias", g, Tensor::full(&[1], init.final_bias))?,
        })
    }

    /// Zero initial recurrent state for a batch of `n`.
    pub fn initial_state<T: Real>(&self, tape: &mut Tape<T>, n: usize) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros(&[n, self.hidden])),
            c: tape.constant(Tensor::zeros(&[n, self.hidden])),
        }
    }
}

/// Per-block reduction in front of the shared LSTM.
#[derive(Clone, Debug)]
pub struct LayerGate {
    pub config: LayerGateConfig,
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
}

impl LayerGate {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        block: &str,
        config: LayerGateConfig,
        init: &GateInit,
        rng: &mut R,
    ) -> Result<Self> {
        if config.input_channels == 0 || config.reduce == 0 || config.hidden == 0 {
            return Err(Error::Config(format!("degenerate layer gate {:?}", config)));
        }
        let g = ParamGroup::Gate;
        Ok(LayerGate {
            config,
            reduce_w: store.add(
                format!("gate.layer.reduce.{}.weight", block),
                g,
                gaussian(&[config.reduce, config.input_channels], init.hidden_std, rng),
            )?,
            reduce_b: store.add(format!("gate.layer.reduce.{}.bias", block), g, Tensor::zeros(&[config.reduce]))?,
        })
    }
}

/// One recurrent step: global pool, 1×1 reduction, LSTM, projection, sigmoid.
/// Returns the soft value `[N, 1]` and the carried state.
pub fn layer_gate_step<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_>,
    shared: &SharedLayerGate,
    gate: &LayerGate,
    feature: Var,
    state: LstmState,
) -> Result<(Var, LstmState)> {
    let [_, c, _, _] = tape.value(feature).dims4("layer_gate")?;
    if c != gate.config.input_channels {
        return Err(Error::shape(
            "layer_gate",
            format!("feature has {} channels, gate expects {}", c, gate.config.input_channels),
        ));
    }
    if gate.config.reduce != shared.reduce || gate.config.hidden != shared.hidden {
        return Err(Error::shape("layer_gate", "block gate and shared LSTM disagree on widths"));
    }
    let pooled = tape.global_avg_pool(feature)?;
    let (rw, rb) = (binder.bind(tape, gate.reduce_w), binder.bind(tape, gate.reduce_b));
    let reduced = tape.linear(pooled, rw, Some(rb))?;
    let lstm = LstmVars {
        w_ih: binder.bind(tape, shared.w_ih),
        w_hh: binder.bind(tape, shared.w_hh),
        bias: binder.bind(tape, shared.bias),
    };
    let next = lstm_cell(tape, &lstm, reduced, state)?;
    let (pw, pb) = (binder.bind(tape, shared.proj_w), binder.bind(tape, shared.proj_b));
    let logit = tape.linear(next.h, pw, Some(pb))?;
    Ok((tape.sigmoid(logit)?, next))
}

#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub config: ChannelGateConfig,
    /// Trunk conv weights with their stride and padding.
    pub convs: Vec<(ParamId, usize, usize)>,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

impl ChannelGate {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        block: &str,
        config: ChannelGateConfig,
        init: &GateInit,
        rng: &mut R,
    ) -> Result<Self> {
        config.check()?;
        let g = ParamGroup::Gate;
        let mut convs = Vec::new();
        for (i, (cin, cout, k, stride, pad)) in config.convs().into_iter().enumerate() {
            let w = gaussian(&[cout, cin, k, k], init.hidden_std, rng);
            convs.push((store.add(format!("gate.channel.{}.conv{}.weight", block, i + 1), g, w)?, stride, pad));
        }
        let width = config.trunk_width();
        Ok(ChannelGate {
            config,
            convs,
            fc_w: store.add(
                format!("gate.channel.{}.fc.weight", block),
                g,
                gaussian(&[config.out_channels, width], init.weight_std, rng),
            )?,
            fc_b: store.add(
                format!("gate.channel.{}.fc.bias", block),
                g,
                Tensor::full(&[config.out_channels], init.final_bias),
            )?,
        })
    }
}

/// Soft channel decisions `[N, k]` for the block whose input is `feature`.
pub fn channel_gate_eval<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_>,
    gate: &ChannelGate,
    feature: Var,
) -> Result<Var> {
    let [_, c, _, _] = tape.value(feature).dims4("channel_gate")?;
    if c != gate.config.in_channels {
        return Err(Error::shape(
            "channel_gate",
            format!("feature has {} channels, gate expects {}", c, gate.config.in_channels),
        ));
    }
    let mut x = feature;
    for &(w, stride, pad) in &gate.convs {
        let wv = binder.bind(tape, w);
        x = tape.conv2d(x, wv, stride, pad)?;
        x = tape.relu(x)?;
    }
    let pooled = tape.global_avg_pool(x)?;
    let (fw, fb) = (binder.bind(tape, gate.fc_w), binder.bind(tape, gate.fc_b));
    let logit = tape.linear(pooled, fw, Some(fb))?;
    tape.sigmoid(logit)
}

/// Cost of one layer-gate step on an `h×w` input. The LSTM is counted by its
/// two matrix products; its elementwise nonlinearities are not.
pub fn layer_gate_cost(config: &LayerGateConfig, h: usize, w: usize, tiling: &Tiling) -> Result<LayerCost> {
    let LayerGateConfig { input_channels: c, reduce, hidden } = *config;
    if c == 0 || reduce == 0 || hidden == 0 {
        return Err(Error::CostModel(format!("degenerate layer gate {:?}", config)));
    }
    Ok(costmodel::global_pool_cost(c, h, w)?
        + costmodel::fc_cost(c, reduce, tiling)?
        + costmodel::fc_cost(reduce, 4 * hidden, tiling)?
        + costmodel::fc_cost(hidden, 4 * hidden, tiling)?
        + costmodel::fc_cost(hidden, 1, tiling)?)
}

/// Cost of one channel-gate evaluation on an `h×w` input.
pub fn channel_gate_cost(config: &ChannelGateConfig, h: usize, w: usize, tiling: &Tiling) -> Result<LayerCost> {
    config.check().map_err(|e| Error::CostModel(e.to_string()))?;
    let (mut h, mut w) = (h, w);
    let mut total = LayerCost::ZERO;
    for (cin, cout, k, stride, pad) in config.convs() {
        let d = ConvDims::conv(cin, cout, k, h, w, stride, pad);
        total += costmodel::conv_cost(&d, tiling)?;
        (h, w) = (d.hout, d.wout);
    }
    Ok(total
        + costmodel::global_pool_cost(config.trunk_width(), h, w)?
        + costmodel::fc_cost(config.trunk_width(), config.out_channels, tiling)?)
}

/// FLOPs of a gate pipeline.
pub fn gate_flops(config: &ChannelGateConfig, h: usize, w: usize) -> Result<f64> {
    Ok(channel_gate_cost(config, h, w, &Tiling::default())?.flops)
}

pub fn layer_gate_flops(config: &LayerGateConfig, h: usize, w: usize) -> Result<f64> {
    Ok(layer_gate_cost(config, h, w, &Tiling::default())?.flops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_boundary() {
        assert!(binarize(0.5));
        assert!(!binarize(0.4999));
        assert_eq!(binarize_all(&[0.1, 0.9, 0.5]), vec![false, true, true]);
    }

    #[test]
    fn decision_rejects_out_of_range() {
        assert!(GateDecision::new(vec![1.5]).is_err());
        let d = GateDecision::new(vec![0.2]).unwrap();
        assert!(d.is_scalar() && !d.hard[0]);
    }

    #[test]
    fn zero_channel_configs_are_errors() {
        let cfg = ChannelGateConfig { variant: ChannelGateVariant::ResNet, in_channels: 0, out_channels: 4 };
        assert!(gate_flops(&cfg, 8, 8).is_err());
        let dense = ChannelGateConfig { variant: ChannelGateVariant::DenseNet { growth: 0 }, in_channels: 8, out_channels: 4 };
        assert!(gate_flops(&dense, 8, 8).is_err());
        let layer = LayerGateConfig { input_channels: 0, reduce: 10, hidden: 10 };
        assert!(layer_gate_flops(&layer, 8, 8).is_err());
    }
}
