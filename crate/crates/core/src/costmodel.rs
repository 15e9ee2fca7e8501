//! Static and dynamic cost accounting.
//!
//! Every layer gets a [`LayerCost`]: multiply-accumulates, FLOPs (two per
//! MAC; pooling charges one per input element read) and access counts for
//! three memory levels `[dram, cache, regfile]`. Access counts come from a
//! closed-form weight-stationary model, measured in 4-byte words:
//!
//! * `W = cout·cin·kh·kw`, `I = cin·hin·win`, `O = cout·hout·wout`.
//! * If `W + I + O` fits in the cache, every operand crosses DRAM once.
//!   Otherwise half the cache holds a tile of `T_c = ⌊(cache/2) / (cin·kh·kw)⌋`
//!   filters and the input is re-streamed once per tile:
//!   `dram = W + I·⌈cout/T_c⌉ + O`.
//! * The register file holds `T_r = ⌊regfile / (kh·kw)⌋` filter windows, so
//!   the cache serves the input once per register tile:
//!   `cache = W + I·⌈cout/T_r⌉ + O`.
//! * `regfile = 3·MACs` (two operand reads and one accumulate).
//!
//! Partially executed layers scale all counts by the executed fraction of
//! output channels.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{self, ChannelGateConfig, ChannelGateVariant, LayerGateConfig};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::trace::SkipTrace;

pub const WORD_BYTES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub macs: f64,
    pub flops: f64,
    /// Access counts `[dram, cache, regfile]`.
    pub acc: [f64; 3],
}

impl LayerCost {
    pub const ZERO: LayerCost = LayerCost { macs: 0.0, flops: 0.0, acc: [0.0; 3] };

    pub fn scaled(self, k: f64) -> LayerCost {
        LayerCost { macs: self.macs * k, flops: self.flops * k, acc: self.acc.map(|a| a * k) }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

impl Add for LayerCost {
    type Output = LayerCost;
    fn add(self, o: LayerCost) -> LayerCost {
        LayerCost {
            macs: self.macs + o.macs,
            flops: self.flops + o.flops,
            acc: [self.acc[0] + o.acc[0], self.acc[1] + o.acc[1], self.acc[2] + o.acc[2]],
        }
    }
}

impl AddAssign for LayerCost {
    fn add_assign(&mut self, o: LayerCost) {
        *self = *self + o;
    }
}

impl Sum for LayerCost {
    fn sum<I: Iterator<Item = LayerCost>>(iter: I) -> LayerCost {
        iter.fold(LayerCost::ZERO, |a, b| a + b)
    }
}

/// On-chip capacities for the access model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tiling {
    pub cache_bytes: usize,
    pub regfile_bytes: usize,
}

impl Default for Tiling {
    fn default() -> Self {
        Tiling { cache_bytes: 108 * 1024, regfile_bytes: 512 }
    }
}

/// Geometry of one convolution (a fully connected layer is a 1×1 conv on a 1×1 map).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub hin: usize,
    pub win: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvDims {
    /// Output size follows `⌊(h + 2p − k)/s⌋ + 1`.
    pub fn conv(cin: usize, cout: usize, k: usize, h: usize, w: usize, stride: usize, pad: usize) -> Self {
        let out = |d: usize| (d + 2 * pad).saturating_sub(k) / stride.max(1) + 1;
        ConvDims { cin, cout, kh: k, kw: k, hin: h, win: w, hout: out(h), wout: out(w) }
    }

    pub fn fc(cin: usize, cout: usize) -> Self {
        ConvDims { cin, cout, kh: 1, kw: 1, hin: 1, win: 1, hout: 1, wout: 1 }
    }

    fn check(&self) -> Result<()> {
        let d = [self.cin, self.cout, self.kh, self.kw, self.hin, self.win, self.hout, self.wout];
        if d.contains(&0) {
            return Err(Error::CostModel(format!("zero dimension in {:?}", self)));
        }
        Ok(())
    }

    pub fn macs(&self) -> f64 {
        (self.cin * self.cout * self.kh * self.kw * self.hout * self.wout) as f64
    }
}

/// MAC and FLOP counts plus modeled memory accesses for one convolution.
pub fn conv_cost(d: &ConvDims, tiling: &Tiling) -> Result<LayerCost> {
    d.check()?;
    let macs = d.macs();
    Ok(LayerCost { macs, flops: 2.0 * macs, acc: count_mem_accesses(d, tiling)? })
}

pub fn fc_cost(cin: usize, cout: usize, tiling: &Tiling) -> Result<LayerCost> {
    conv_cost(&ConvDims::fc(cin, cout), tiling)
}

/// Pooling reads every window element once; `reads` is that total.
pub fn pool_cost(c: usize, hin: usize, win: usize, hout: usize, wout: usize, reads: usize) -> Result<LayerCost> {
    if [c, hin, win, hout, wout].contains(&0) {
        return Err(Error::CostModel("zero dimension in pooling layer".into()));
    }
    let io = (c * (hin * win + hout * wout)) as f64;
    Ok(LayerCost { macs: 0.0, flops: reads as f64, acc: [io, io, reads as f64] })
}

pub fn global_pool_cost(c: usize, h: usize, w: usize) -> Result<LayerCost> {
    pool_cost(c, h, w, 1, 1, c * h * w)
}

pub fn window_pool_cost(c: usize, h: usize, w: usize, window: usize, stride: usize) -> Result<LayerCost> {
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::CostModel(format!("pool window {} on {}×{}", window, h, w)));
    }
    let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
    pool_cost(c, h, w, ho, wo, c * ho * wo * window * window)
}

/// `[dram, cache, regfile]` word accesses for a convolution.
pub fn count_mem_accesses(d: &ConvDims, tiling: &Tiling) -> Result<[f64; 3]> {
    d.check()?;
    let cache_words = tiling.cache_bytes / WORD_BYTES;
    let rf_words = tiling.regfile_bytes / WORD_BYTES;
    let filter = d.cin * d.kh * d.kw;
    let window = d.kh * d.kw;
    let (w, i, o) = (d.cout * filter, d.cin * d.hin * d.win, d.cout * d.hout * d.wout);

    let cache_tile = (cache_words / 2) / filter;
    if cache_tile == 0 {
        return Err(Error::CostModel(format!(
            "cache of {} bytes cannot hold one {}-word filter",
            tiling.cache_bytes, filter
        )));
    }
    let rf_tile = rf_words / window;
    if rf_tile == 0 {
        return Err(Error::CostModel(format!(
            "register file of {} bytes cannot hold one {}×{} window",
            tiling.regfile_bytes, d.kh, d.kw
        )));
    }
    let dram_passes = if w + i + o <= cache_words { 1 } else { d.cout.div_ceil(cache_tile) };
    let cache_passes = d.cout.div_ceil(rf_tile);
    Ok([
        (w + i * dram_passes + o) as f64,
        (w + i * cache_passes + o) as f64,
        3.0 * d.macs(),
    ])
}

/// Per-access and per-MAC energies in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    /// `[e_dram, e_cache, e_rf]`
    pub e: [f64; 3],
    pub e_mac: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { e: [200.0, 6.0, 1.0], e_mac: 1.0 }
    }
}

impl EnergyParams {
    pub fn new(e: [f64; 3], e_mac: f64) -> Result<Self> {
        let p = EnergyParams { e, e_mac };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let [d, c, r] = self.e;
        if !(d > c && c > r && r > 0.0 && self.e_mac > 0.0) || !self.e_mac.is_finite() || !d.is_finite() {
            return Err(Error::CostModel(format!(
                "energy parameters must satisfy e_dram > e_cache > e_rf > 0 and e_mac > 0, got {:?} / {}",
                self.e, self.e_mac
            )));
        }
        Ok(())
    }
}

/// `Σ acc_i·e_i + macs·e_mac`.
pub fn energy(cost: &LayerCost, p: &EnergyParams) -> f64 {
    cost.acc[0] * p.e[0] + cost.acc[1] * p.e[1] + cost.acc[2] * p.e[2] + cost.macs * p.e_mac
}

/// What a scalar cost measures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Metric {
    /// Each gated unit costs 1 when fully executed; everything else is free.
    Uniform,
    Flops,
    Energy(EnergyParams),
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Uniform => "uniform",
            Metric::Flops => "flops",
            Metric::Energy(_) => "energy",
        }
    }

    pub fn parse(name: &str, params: EnergyParams) -> Result<Metric> {
        match name {
            "uniform" => Ok(Metric::Uniform),
            "flops" => Ok(Metric::Flops),
            "energy" => {
                params.validate()?;
                Ok(Metric::Energy(params))
            }
            other => Err(Error::Config(format!("unknown cost metric `{}` (uniform, flops, energy)", other))),
        }
    }

    /// Value of a raw count bundle; zero under the uniform metric.
    pub fn of(&self, c: &LayerCost) -> f64 {
        match self {
            Metric::Uniform => 0.0,
            Metric::Flops => c.flops,
            Metric::Energy(p) => energy(c, p),
        }
    }
}

/// Cost entries for one backbone unit (a residual block or a dense layer).
///
/// `layer_part` is paid whenever the unit runs; `channel_part` scales with the
/// fraction of output channels the channel gate keeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitCost {
    pub name: String,
    pub stage: usize,
    pub gated: bool,
    pub channels: usize,
    pub layer_part: LayerCost,
    pub channel_part: LayerCost,
    pub layer_gate: LayerCost,
    pub channel_gate: LayerCost,
}

impl UnitCost {
    pub fn body(&self) -> LayerCost {
        self.layer_part + self.channel_part
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchCost {
    /// Index of the unit whose output the branch consumes.
    pub after_unit: usize,
    pub cost: LayerCost,
}

/// Unit costs in a metric's units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitMetric {
    pub layer_part: f64,
    pub channel_part: f64,
    pub layer_gate: f64,
    pub channel_gate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub stem: LayerCost,
    pub units: Vec<UnitCost>,
    pub branches: Vec<BranchCost>,
    pub head: LayerCost,
}

impl CostLedger {
    pub fn unit_metric(&self, unit: usize, metric: &Metric) -> UnitMetric {
        let u = &self.units[unit];
        match metric {
            Metric::Uniform => {
                let total = u.layer_part.flops + u.channel_part.flops;
                let lp = if total > 0.0 { u.layer_part.flops / total } else { 0.0 };
                UnitMetric { layer_part: lp, channel_part: 1.0 - lp, layer_gate: 0.0, channel_gate: 0.0 }
            }
            m => UnitMetric {
                layer_part: m.of(&u.layer_part),
                channel_part: m.of(&u.channel_part),
                layer_gate: m.of(&u.layer_gate),
                channel_gate: m.of(&u.channel_gate),
            },
        }
    }

    pub fn stem_metric(&self, metric: &Metric) -> f64 {
        metric.of(&self.stem)
    }

    pub fn head_metric(&self, metric: &Metric) -> f64 {
        metric.of(&self.head)
    }

    pub fn branch_metric(&self, branch: usize, metric: &Metric) -> f64 {
        metric.of(&self.branches[branch].cost)
    }

    /// Body cost of a unit that runs with the given channel fraction.
    pub fn body_metric(&self, unit: usize, fraction: f64, metric: &Metric) -> f64 {
        let m = self.unit_metric(unit, metric);
        m.layer_part + m.channel_part * fraction
    }

    /// Stem, every unit body and the head: the ungated network.
    pub fn static_total(&self) -> LayerCost {
        self.stem + self.units.iter().map(UnitCost::body).sum::<LayerCost>() + self.head
    }

    pub fn gate_overhead(&self) -> LayerCost {
        self.units.iter().map(|u| u.layer_gate + u.channel_gate).sum()
    }

    pub fn static_metric(&self, metric: &Metric) -> f64 {
        match metric {
            Metric::Uniform => self.units.len() as f64,
            m => m.of(&self.static_total()),
        }
    }

    pub fn gated_units(&self) -> impl Iterator<Item = usize> + '_ {
        self.units.iter().enumerate().filter(|(_, u)| u.gated).map(|(i, _)| i)
    }

    /// Realized cost of a trace in raw counts (metric-independent).
    pub fn realized_counts(&self, trace: &SkipTrace) -> Result<LayerCost> {
        self.check_trace(trace)?;
        let mut total = self.stem;
        let mut branches = trace.branches.iter().peekable();
        for (i, (u, t)) in self.units.iter().zip(&trace.units).enumerate() {
            if u.gated {
                total += u.layer_gate;
                if t.layer == Some(true) {
                    total += u.channel_gate + u.layer_part + u.channel_part.scaled(t.executed_fraction());
                }
            } else {
                total += u.body();
            }
            while let Some(&&b) = branches.peek() {
                if self.branches[b].after_unit != i {
                    break;
                }
                total += self.branches[b].cost;
                branches.next();
            }
        }
        if let Some(h) = trace.halted {
            let u = &self.units[h.unit];
            total += u.layer_gate;
            if h.channel_gate {
                total += u.channel_gate;
            }
        }
        if trace.head {
            total += self.head;
        }
        Ok(total)
    }

    fn check_trace(&self, trace: &SkipTrace) -> Result<()> {
        let complete = trace.units.len() == self.units.len();
        if trace.units.len() > self.units.len() || (trace.head && (!complete || trace.halted.is_some())) {
            return Err(Error::CostModel(format!(
                "trace has {} units, ledger has {}",
                trace.units.len(),
                self.units.len()
            )));
        }
        if let Some(h) = trace.halted {
            if h.unit != trace.units.len() || !self.units.get(h.unit).is_some_and(|u| u.gated) {
                return Err(Error::CostModel(format!("halted gates at unit {} do not follow the trace", h.unit)));
            }
        }
        for (i, (u, t)) in self.units.iter().zip(&trace.units).enumerate() {
            if u.gated != t.gated || (u.gated && t.layer.is_none()) {
                return Err(Error::CostModel(format!("trace entry {} disagrees with the ledger on gating", i)));
            }
            if let Some(ch) = &t.channels {
                if ch.len() != u.channels {
                    return Err(Error::CostModel(format!(
                        "unit {} has {} channel bits, ledger expects {}",
                        i,
                        ch.len(),
                        u.channels
                    )));
                }
            }
        }
        let mut last = None;
        for &b in &trace.branches {
            if b >= self.branches.len() {
                return Err(Error::CostModel(format!("trace names branch {} of {}", b, self.branches.len())));
            }
            if last.is_some_and(|l: usize| l >= b) {
                return Err(Error::CostModel("trace branches out of execution order".into()));
            }
            if self.branches[b].after_unit >= trace.units.len() {
                return Err(Error::CostModel(format!("branch {} sits after a unit the trace never ran", b)));
            }
            last = Some(b);
        }
        Ok(())
    }
}

/// Realized cost of one trace, split by where it was spent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicCost {
    pub stem: f64,
    /// Per unit: gates actually evaluated plus the executed body.
    pub per_unit: Vec<f64>,
    pub gate_overhead: f64,
    pub branches: f64,
    pub head: f64,
    /// Running sum in execution order.
    pub total: f64,
}

/// Realized cost in metric units, accumulated in execution order: stem, then
/// per unit the layer gate, channel gate (only behind an open layer gate) and
/// body, then any branch attached after that unit, then the head.
pub fn dynamic_cost(trace: &SkipTrace, ledger: &CostLedger, metric: &Metric) -> Result<DynamicCost> {
    ledger.check_trace(trace)?;
    let mut out = DynamicCost { per_unit: Vec::with_capacity(ledger.units.len()), ..Default::default() };
    out.stem = ledger.stem_metric(metric);
    out.total = out.stem;
    let mut branches = trace.branches.iter().peekable();
    for (i, (u, t)) in ledger.units.iter().zip(&trace.units).enumerate() {
        let m = ledger.unit_metric(i, metric);
        let mut unit = 0.0;
        if u.gated {
            out.total += m.layer_gate;
            unit += m.layer_gate;
            out.gate_overhead += m.layer_gate;
            if t.layer == Some(true) {
                out.total += m.channel_gate;
                unit += m.channel_gate;
                out.gate_overhead += m.channel_gate;
                let body = ledger.body_metric(i, t.executed_fraction(), metric);
                out.total += body;
                unit += body;
            }
        } else {
            let body = ledger.body_metric(i, 1.0, metric);
            out.total += body;
            unit += body;
        }
        out.per_unit.push(unit);
        while let Some(&&b) = branches.peek() {
            if ledger.branches[b].after_unit != i {
                break;
            }
            let c = ledger.branch_metric(b, metric);
            out.total += c;
            out.branches += c;
            branches.next();
        }
    }
    if let Some(h) = trace.halted {
        let m = ledger.unit_metric(h.unit, metric);
        out.total += m.layer_gate;
        out.gate_overhead += m.layer_gate;
        if h.channel_gate {
            out.total += m.channel_gate;
            out.gate_overhead += m.channel_gate;
        }
    }
    if trace.head {
        out.head = ledger.head_metric(metric);
        out.total += out.head;
    }
    Ok(out)
}

/// Soft gate outputs of one gated unit on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SoftGates {
    pub unit: usize,
    /// `[N, 1]`
    pub layer: Var,
    /// `[N, k]`
    pub channels: Var,
}

/// Differentiable expected cost: batch mean of
/// `Σ_units L·(layer_part + channel_part·mean(C))`.
///
/// Gate overhead, ungated units and branches are constants with respect to
/// the gates and are left out.
pub fn expected_cost<T: Real>(
    tape: &mut Tape<T>,
    gates: &[SoftGates],
    ledger: &CostLedger,
    metric: &Metric,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for g in gates {
        let Some(u) = ledger.units.get(g.unit) else {
            return Err(Error::CostModel(format!("gate refers to unit {} of {}", g.unit, ledger.units.len())));
        };
        if !u.gated {
            return Err(Error::CostModel(format!("unit {} (`{}`) is not gated", g.unit, u.name)));
        }
        let [_, k] = tape.value(g.channels).dims2("expected_cost")?;
        if k != u.channels {
            return Err(Error::CostModel(format!("unit {} gate width {} but {} channels", g.unit, k, u.channels)));
        }
        let m = ledger.unit_metric(g.unit, metric);
        let frac = tape.mean_cols(g.channels)?;
        let cost = tape.affine(frac, T::lit(m.channel_part), T::lit(m.layer_part))?;
        let term = tape.mul(g.layer, cost)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => tape.mean_all(a),
        None => Ok(tape.constant(Tensor::scalar(T::zero()))),
    }
}

/// Canonical comparison points for gate overhead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Layer,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Basic block of two 64-channel 3×3 convolutions on 56×56 maps.
    ResNet34,
    /// All 48 dense layers of the 100-layer, growth-12 network on 32×32 inputs.
    DenseNet100,
}

/// FLOPs of a residual basic block with `c` channels on an `s×s` map.
pub fn basic_block_cost(c: usize, s: usize, tiling: &Tiling) -> Result<(LayerCost, LayerCost)> {
    let d = ConvDims::conv(c, c, 3, s, s, 1, 1);
    Ok((conv_cost(&d, tiling)?, conv_cost(&d, tiling)?))
}

/// Bottleneck (1×1 to `4g`) and 3×3 conv (to `g`) of one dense layer.
pub fn dense_layer_cost(cin: usize, growth: usize, s: usize, tiling: &Tiling) -> Result<(LayerCost, LayerCost)> {
    let b = conv_cost(&ConvDims::conv(cin, 4 * growth, 1, s, s, 1, 0), tiling)?;
    let c = conv_cost(&ConvDims::conv(4 * growth, growth, 3, s, s, 1, 1), tiling)?;
    Ok((b, c))
}

/// Gate FLOPs over gated-unit FLOPs.
pub fn overhead_ratio(gate: GateKind, block: BlockKind) -> Result<f64> {
    let tiling = Tiling::default();
    match block {
        BlockKind::ResNet34 => {
            let (c, s) = (64, 56);
            let (a, b) = basic_block_cost(c, s, &tiling)?;
            let g = match gate {
                GateKind::Layer => gating::layer_gate_cost(&LayerGateConfig::new(c), s, s, &tiling)?,
                GateKind::Channel => gating::channel_gate_cost(
                    &ChannelGateConfig { variant: ChannelGateVariant::ResNet, in_channels: c, out_channels: c },
                    s,
                    s,
                    &tiling,
                )?,
            };
            Ok(g.flops / (a + b).flops)
        }
        BlockKind::DenseNet100 => {
            let (growth, layers) = (12, 16);
            let (mut gate_flops, mut layer_flops) = (0.0, 0.0);
            let mut width = 2 * growth;
            for (stage, s) in [32usize, 16, 8].into_iter().enumerate() {
                if stage > 0 {
                    width /= 2;
                }
                for _ in 0..layers {
                    let (b, c) = dense_layer_cost(width, growth, s, &tiling)?;
                    layer_flops += (b + c).flops;
                    gate_flops += match gate {
                        GateKind::Layer => gating::layer_gate_cost(&LayerGateConfig::new(width), s, s, &tiling)?,
                        GateKind::Channel => gating::channel_gate_cost(
                            &ChannelGateConfig {
                                variant: ChannelGateVariant::DenseNet { growth },
                                in_channels: width,
                                out_channels: growth,
                            },
                            s,
                            s,
                            &tiling,
                        )?,
                    }
                    .flops;
                    width += growth;
                }
            }
            Ok(gate_flops / layer_flops)
        }
    }
}

/// One row of a cost report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCostRow {
    pub id: usize,
    pub name: String,
    pub macs: f64,
    pub flops: f64,
    pub acc: [f64; 3],
    pub executed_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub macs: f64,
    pub flops: f64,
    pub acc: [f64; 3],
    pub energy: f64,
}

impl CostTotals {
    fn from_cost(c: &LayerCost, p: &EnergyParams) -> Self {
        CostTotals { macs: c.macs, flops: c.flops, acc: c.acc, energy: energy(c, p) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub metric: String,
    pub energy_params: EnergyParams,
    pub blocks: Vec<BlockCostRow>,
    /// Ungated network: stem, all unit bodies, head.
    pub static_total: CostTotals,
    pub gate_overhead: CostTotals,
    /// Mean realized cost over the evaluated traces.
    pub realized: CostTotals,
    pub realized_metric: f64,
    pub savings: f64,
}

impl CostReport {
    /// Builds a report from the traces of an evaluation pass.
    pub fn from_traces(ledger: &CostLedger, traces: &[SkipTrace], metric: &Metric, params: &EnergyParams) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::CostModel("cost report needs at least one trace".into()));
        }
        let n = traces.len() as f64;
        let mut fractions = vec![0.0; ledger.units.len()];
        let mut realized = LayerCost::ZERO;
        let mut realized_metric = 0.0;
        for t in traces {
            for (f, u) in fractions.iter_mut().zip(&t.units) {
                *f += u.executed_fraction();
            }
            realized += ledger.realized_counts(t)?;
            realized_metric += dynamic_cost(t, ledger, metric)?.total;
        }
        let realized = realized.scaled(1.0 / n);
        let realized_metric = realized_metric / n;
        let blocks = ledger
            .units
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let b = u.body();
                BlockCostRow { id: i, name: u.name.clone(), macs: b.macs, flops: b.flops, acc: b.acc, executed_fraction: fractions[i] / n }
            })
            .collect();
        let vanilla = ledger.static_metric(metric);
        Ok(CostReport {
            metric: metric.name().to_string(),
            energy_params: *params,
            blocks,
            static_total: CostTotals::from_cost(&ledger.static_total(), params),
            gate_overhead: CostTotals::from_cost(&ledger.gate_overhead(), params),
            realized: CostTotals::from_cost(&realized, params),
            realized_metric,
            savings: if vanilla > 0.0 { 1.0 - realized_metric / vanilla } else { 0.0 },
        })
    }
}
