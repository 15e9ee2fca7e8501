//! Residual and dense backbones with layer/channel gating and branch exits.
//!
//! A network is a stem, an ordered list of units, optional branch
//! classifiers attached after some units, and a final head. A unit is a
//! residual block, a dense layer or a dense transition. Shape-preserving
//! units carry a layer gate and a channel gate and combine as
//!
//! ```text
//! out = g ⊙ C(x) + (1 − g) ⊙ fallback(x),   g = G_L · G_C (per channel)
//! ```
//!
//! where `fallback` is the unit input for residual blocks and the most recent
//! produced `g`-channel slice for dense layers.

pub mod arch;

use rand::Rng;

pub use arch::{branch_positions, ArchConfig, BackboneKind, BranchSettings, GateSettings};

use crate::costmodel::{self, BranchCost, ConvDims, CostLedger, LayerCost, SoftGates, UnitCost};
use crate::error::{Error, Result};
use crate::gating::{
    self, channel_gate_eval, layer_gate_step, ChannelGate, ChannelGateConfig, ChannelGateVariant, LayerGate,
    LayerGateConfig, SharedLayerGate,
};
use crate::numerics::params::kaiming_normal;
use crate::numerics::{
    BatchStats, Binder, BnMode, Checkpoint, LstmState, ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var,
};
use crate::trace::{SkipTrace, UnitTrace};

/// Running-statistics momentum for batchnorm.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
pub struct Bn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl Bn {
    fn register(store: &mut ParamStore, name: &str, c: usize, group: ParamGroup) -> Result<Bn> {
        Ok(Bn {
            gamma: store.add(format!("{}.gamma", name), group, Tensor::full(&[c], 1.0))?,
            beta: store.add(format!("{}.beta", name), group, Tensor::zeros(&[c]))?,
            mean: store.add(format!("{}.running_mean", name), ParamGroup::Buffer, Tensor::zeros(&[c]))?,
            var: store.add(format!("{}.running_var", name), ParamGroup::Buffer, Tensor::full(&[c], 1.0))?,
        })
    }
}

/// Batch statistics from one training-mode batchnorm, to be folded into the
/// running averages after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate<T: Real> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// Batchnorm mode for a forward pass plus the statistics it collected.
#[derive(Debug)]
pub struct BnCtx<T: Real> {
    pub train: bool,
    pub updates: Vec<BnUpdate<T>>,
}

impl<T: Real> BnCtx<T> {
    pub fn new(train: bool) -> Self {
        BnCtx { train, updates: Vec::new() }
    }
}

fn bn_apply<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<'_>, bn: &Bn, x: Var, ctx: &mut BnCtx<T>) -> Result<Var> {
    let g = binder.bind(tape, bn.gamma);
    let b = binder.bind(tape, bn.beta);
    let mode = if ctx.train {
        BnMode::Train
    } else {
        BnMode::Eval { mean: binder.value::<T>(bn.mean).into_data(), var: binder.value::<T>(bn.var).into_data() }
    };
    let (y, stats) = tape.batch_norm(x, g, b, mode)?;
    if let Some(stats) = stats {
        ctx.updates.push(BnUpdate { mean: bn.mean, var: bn.var, stats });
    }
    Ok(y)
}

fn register_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) -> Result<ParamId> {
    store.add(format!("{}.weight", name), group, kaiming_normal(&[cout, cin, k, k], cin * k * k, rng))
}

/// Convolution followed by batchnorm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: ParamId,
    pub bn: Bn,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<ConvBn> {
        Ok(ConvBn {
            conv: register_conv(store, &format!("{}.conv", name), group, cout, cin, k, rng)?,
            bn: Bn::register(store, &format!("{}.bn", name), cout, group)?,
            stride,
            pad: k / 2,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_>, x: Var, ctx: &mut BnCtx<T>) -> Result<Var> {
        let w = binder.bind(tape, self.conv);
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        bn_apply(tape, binder, &self.bn, y, ctx)
    }
}

#[derive(Clone, Debug)]
pub enum UnitKind {
    /// `relu(bn2(conv2(relu(bn1(conv1 x)))) + shortcut(x))`
    Residual { conv1: ConvBn, conv2: ConvBn, shortcut: Option<ConvBn> },
    /// Pre-activation bottleneck producing `growth` new channels.
    Dense { bn1: Bn, conv1: ParamId, bn2: Bn, conv2: ParamId, growth: usize },
    /// `avgpool(conv1x1(relu(bn x)))` between dense blocks.
    Transition { bn: Bn, conv: ParamId },
}

#[derive(Clone, Debug)]
pub struct UnitGates {
    pub layer: LayerGate,
    pub channel: ChannelGate,
}

#[derive(Clone, Debug)]
pub struct Unit {
    pub name: String,
    /// 0-based stage index.
    pub stage: usize,
    pub kind: UnitKind,
    /// `[c, h, w]` of the unit input.
    pub in_shape: [usize; 3],
    /// `[c, h, w]` of the unit output.
    pub out_shape: [usize; 3],
    pub gates: Option<UnitGates>,
}

impl Unit {
    /// Shape of what the unit computes and of its fallback when skipped;
    /// `None` for units that cannot be skipped.
    pub fn skip_shapes(&self) -> Option<([usize; 3], [usize; 3])> {
        let [c, h, w] = self.in_shape;
        match &self.kind {
            UnitKind::Residual { .. } => Some((self.out_shape, self.in_shape)),
            UnitKind::Dense { growth, .. } => Some(([*growth, h, w], [(*growth).min(c), h, w])),
            UnitKind::Transition { .. } => None,
        }
    }

    pub fn is_gated(&self) -> bool {
        self.gates.is_some()
    }

    /// Output channel count the channel gate decides over.
    pub fn gated_channels(&self) -> usize {
        match &self.kind {
            UnitKind::Dense { growth, .. } => *growth,
            _ => self.out_shape[0],
        }
    }
}

impl UnitGates {
    /// Registers gates for `unit`; fails when skipping the unit would change
    /// the shape of its output.
    pub fn attach<R: Rng + ?Sized>(
        store: &mut ParamStore,
        unit: &Unit,
        settings: &GateSettings,
        rng: &mut R,
    ) -> Result<UnitGates> {
        let Some((produced, fallback)) = unit.skip_shapes() else {
            return Err(Error::Config(format!("unit `{}` is a transition and cannot be gated", unit.name)));
        };
        if produced != fallback {
            return Err(Error::Config(format!(
                "unit `{}` changes shape {:?} -> {:?}; only shape-preserving units can be gated",
                unit.name, fallback, produced
            )));
        }
        let c = unit.in_shape[0];
        let init = settings.init();
        let layer = LayerGate::register(
            store,
            &unit.name,
            LayerGateConfig { input_channels: c, reduce: settings.reduce, hidden: settings.lstm_hidden },
            &init,
            rng,
        )?;
        let variant = match unit.kind {
            UnitKind::Dense { growth, .. } => ChannelGateVariant::DenseNet { growth },
            _ => ChannelGateVariant::ResNet,
        };
        let channel = ChannelGate::register(
            store,
            &unit.name,
            ChannelGateConfig { variant, in_channels: c, out_channels: unit.gated_channels() },
            &init,
            rng,
        )?;
        Ok(UnitGates { layer, channel })
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: ParamId,
    pub bn: Option<Bn>,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub name: String,
    pub stage: usize,
    /// Index of the unit whose output the branch reads.
    pub after_unit: usize,
    /// Each trunk stage is a 2×2 stride-2 max pool followed by this conv.
    pub trunk: Vec<ConvBn>,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub bn: Option<Bn>,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

/// How gates act during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Features are blended with the sigmoid outputs; differentiable.
    Soft,
    /// Gate outputs are binarized; inference only.
    Hard,
    /// Gates are not evaluated and every unit runs in full.
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub gates: GateMode,
    pub bn_train: bool,
    /// Evaluate every branch classifier.
    pub branches: bool,
}

impl ForwardOptions {
    pub fn train(gates: GateMode, branches: bool) -> Self {
        ForwardOptions { gates, bn_train: true, branches }
    }

    pub fn eval(gates: GateMode) -> Self {
        ForwardOptions { gates, bn_train: false, branches: true }
    }
}

/// Soft gate outputs of one unit for a batch, as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitGateValues {
    pub unit: usize,
    /// `[N]`
    pub layer: Vec<f64>,
    /// `[N·k]`, row-major.
    pub channels: Vec<f64>,
    pub k: usize,
}

#[derive(Debug)]
pub struct ForwardPass<T: Real> {
    /// Branch logits in order, then the final head: exit `i + 1` is `exits[i]`.
    pub exits: Vec<Var>,
    pub soft_gates: Vec<SoftGates>,
    pub gate_values: Vec<UnitGateValues>,
    pub bn_updates: Vec<BnUpdate<T>>,
    /// One trace per sample, with hard decisions taken from the gate outputs.
    pub traces: Vec<SkipTrace>,
    /// Output feature map of every unit, in order.
    pub features: Vec<Var>,
}

impl<T: Real> ForwardPass<T> {
    pub fn head(&self) -> Var {
        *self.exits.last().expect("network always has a head")
    }
}

/// Hard gate bits of one sample at one unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardGate {
    pub layer: bool,
    pub channels: Vec<bool>,
}

/// Combines a unit's computed output with its fallback under gate `g[N, C]`.
pub fn mgl2s_combine<T: Real>(tape: &mut Tape<T>, produced: Var, fallback: Var, layer: Var, channels: Var) -> Result<Var> {
    let g = tape.mul_rows(channels, layer)?;
    tape.blend_channels(produced, fallback, g)
}

#[derive(Debug)]
pub struct Network {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub stem: Stem,
    pub units: Vec<Unit>,
    pub branches: Vec<Branch>,
    pub head: Head,
    pub layer_gate: SharedLayerGate,
    pub ledger: CostLedger,
    pub norm_mean: ParamId,
    pub norm_std: ParamId,
    /// Construction notes such as shallow stages with a single branch.
    pub warnings: Vec<String>,
}

pub fn build_resnet(depth: usize, num_classes: usize, seed: u64) -> Result<Network> {
    Network::build(&ArchConfig::resnet(depth, num_classes)?, seed)
}

pub fn build_densenet(depth: usize, growth: usize, num_classes: usize, seed: u64) -> Result<Network> {
    Network::build(&ArchConfig::densenet(depth, growth, num_classes)?, seed)
}

impl Network {
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Network> {
        arch.validate()?;
        let mut rng = crate::seeds::stream(seed, "init");
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let tiling = arch.tiling;
        let mut ledger = CostLedger::default();
        let bb = ParamGroup::Backbone;
        let cin = arch.in_channels;
        let s0 = arch.input_size;

        let norm_mean = store.add("data.mean", ParamGroup::Buffer, Tensor::zeros(&[cin]))?;
        let norm_std = store.add("data.std", ParamGroup::Buffer, Tensor::full(&[cin], 1.0))?;
        let layer_gate = SharedLayerGate::register(&mut store, arch.gates.reduce, arch.gates.lstm_hidden, &arch.gates.init(), rng)?;

        let stem_width = match arch.backbone {
            BackboneKind::ResNet => arch.widths[0],
            BackboneKind::DenseNet => 2 * arch.growth,
        };
        let stem = Stem {
            conv: register_conv(&mut store, "stem.conv", bb, stem_width, cin, 3, rng)?,
            bn: match arch.backbone {
                BackboneKind::ResNet => Some(Bn::register(&mut store, "stem.bn", stem_width, bb)?),
                BackboneKind::DenseNet => None,
            },
        };
        ledger.stem = costmodel::conv_cost(&ConvDims::conv(cin, stem_width, 3, s0, s0, 1, 1), &tiling)?;

        let mut units = Vec::new();
        let mut shape = [stem_width, s0, s0];
        let mut stage_ends = Vec::new();
        for (stage, &depth) in arch.blocks.iter().enumerate() {
            if stage > 0 && arch.backbone == BackboneKind::DenseNet {
                let [c, h, w] = shape;
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!("{}×{} map too small for a transition", h, w)));
                }
                let out = ((c as f64 * arch.compression).floor() as usize).max(1);
                let name = format!("trans{}", stage);
                let unit = Unit {
                    name: name.clone(),
                    stage,
                    kind: UnitKind::Transition {
                        bn: Bn::register(&mut store, &format!("{}.bn", name), c, bb)?,
                        conv: register_conv(&mut store, &format!("{}.conv", name), bb, out, c, 1, rng)?,
                    },
                    in_shape: shape,
                    out_shape: [out, h / 2, w / 2],
                    gates: None,
                };
                let body = costmodel::conv_cost(&ConvDims::conv(c, out, 1, h, w, 1, 0), &tiling)?
                    + costmodel::window_pool_cost(out, h, w, 2, 2)?;
                ledger.units.push(UnitCost {
                    name: name.clone(),
                    stage,
                    gated: false,
                    channels: out,
                    layer_part: body,
                    channel_part: LayerCost::ZERO,
                    layer_gate: LayerCost::ZERO,
                    channel_gate: LayerCost::ZERO,
                });
                shape = unit.out_shape;
                units.push(unit);
            }
            for i in 0..depth {
                let [c, h, w] = shape;
                let (mut unit, layer_part, channel_part) = match arch.backbone {
                    BackboneKind::ResNet => {
                        let name = format!("stage{}.block{}", stage + 1, i + 1);
                        let cout = arch.widths[stage];
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        let d1 = ConvDims::conv(c, cout, 3, h, w, stride, 1);
                        let (ho, wo) = (d1.hout, d1.wout);
                        let shortcut = if stride != 1 || c != cout {
                            Some(ConvBn::register(&mut store, &format!("{}.shortcut", name), bb, c, cout, 1, stride, rng)?)
                        } else {
                            None
                        };
                        let mut lp = costmodel::conv_cost(&d1, &tiling)?;
                        if shortcut.is_some() {
                            lp += costmodel::conv_cost(&ConvDims::conv(c, cout, 1, h, w, stride, 0), &tiling)?;
                        }
                        let cp = costmodel::conv_cost(&ConvDims::conv(cout, cout, 3, ho, wo, 1, 1), &tiling)?;
                        let kind = UnitKind::Residual {
                            conv1: ConvBn::register(&mut store, &format!("{}.conv1", name), bb, c, cout, 3, stride, rng)?,
                            conv2: ConvBn::register(&mut store, &format!("{}.conv2", name), bb, cout, cout, 3, 1, rng)?,
                            shortcut,
                        };
                        let unit = Unit { name, stage, kind, in_shape: shape, out_shape: [cout, ho, wo], gates: None };
                        (unit, lp, cp)
                    }
                    BackboneKind::DenseNet => {
                        let g = arch.growth;
                        let name = format!("block{}.layer{}", stage + 1, i + 1);
                        let (lp, cp) = costmodel::dense_layer_cost(c, g, h, &tiling)?;
                        let kind = UnitKind::Dense {
                            bn1: Bn::register(&mut store, &format!("{}.bn1", name), c, bb)?,
                            conv1: register_conv(&mut store, &format!("{}.conv1", name), bb, 4 * g, c, 1, rng)?,
                            bn2: Bn::register(&mut store, &format!("{}.bn2", name), 4 * g, bb)?,
                            conv2: register_conv(&mut store, &format!("{}.conv2", name), bb, g, 4 * g, 3, rng)?,
                            growth: g,
                        };
                        let unit = Unit { name, stage, kind, in_shape: shape, out_shape: [c + g, h, w], gates: None };
                        (unit, lp, cp)
                    }
                };
                let gateable = matches!(unit.skip_shapes(), Some((p, f)) if p == f);
                let (mut lg, mut cg) = (LayerCost::ZERO, LayerCost::ZERO);
                if gateable {
                    let gates = UnitGates::attach(&mut store, &unit, &arch.gates, rng)?;
                    lg = gating::layer_gate_cost(&gates.layer.config, h, w, &tiling)?;
                    cg = gating::channel_gate_cost(&gates.channel.config, h, w, &tiling)?;
                    unit.gates = Some(gates);
                }
                ledger.units.push(UnitCost {
                    name: unit.name.clone(),
                    stage,
                    gated: gateable,
                    channels: unit.gated_channels(),
                    layer_part,
                    channel_part,
                    layer_gate: lg,
                    channel_gate: cg,
                });
                shape = unit.out_shape;
                units.push(unit);
            }
            stage_ends.push(units.len());
        }

        let mut warnings = Vec::new();
        let mut branches = Vec::new();
        if arch.branches.enabled {
            let mut first = 0;
            for (stage, &end) in stage_ends.iter().enumerate() {
                let layer_units: Vec<usize> =
                    (first..end).filter(|&u| !matches!(units[u].kind, UnitKind::Transition { .. })).collect();
                first = end;
                let positions = match &arch.branches.positions {
                    Some(p) => p[stage].clone(),
                    None => {
                        let (p, warn) = branch_positions(layer_units.len());
                        if let Some(w) = warn {
                            warnings.push(format!("stage {}: {}", stage + 1, w));
                        }
                        p
                    }
                };
                for pos in positions {
                    let after = layer_units[pos - 1];
                    let [c, h, w] = units[after].out_shape;
                    let name = format!("branch{}", branches.len() + 1);
                    let pools = (arch.blocks.len() - 1).saturating_sub(stage).min(2);
                    let mut trunk = Vec::new();
                    let mut cost = LayerCost::ZERO;
                    let (mut bh, mut bw) = (h, w);
                    for p in 0..pools {
                        if bh < 2 || bw < 2 {
                            break;
                        }
                        cost += costmodel::window_pool_cost(c, bh, bw, 2, 2)?;
                        (bh, bw) = (bh / 2, bw / 2);
                        cost += costmodel::conv_cost(&ConvDims::conv(c, c, 3, bh, bw, 1, 1), &tiling)?;
                        trunk.push(ConvBn::register(&mut store, &format!("{}.trunk{}", name, p + 1), ParamGroup::Branch, c, c, 3, 1, rng)?);
                    }
                    cost += costmodel::global_pool_cost(c, bh, bw)? + costmodel::fc_cost(c, arch.num_classes, &tiling)?;
                    let fc_w = store.add(
                        format!("{}.fc.weight", name),
                        ParamGroup::Branch,
                        kaiming_normal(&[arch.num_classes, c], c, rng),
                    )?;
                    let fc_b = store.add(format!("{}.fc.bias", name), ParamGroup::Branch, Tensor::zeros(&[arch.num_classes]))?;
                    ledger.branches.push(BranchCost { after_unit: after, cost });
                    branches.push(Branch { name, stage, after_unit: after, trunk, fc_w, fc_b });
                }
            }
        }

        let [c, h, w] = shape;
        let head = Head {
            bn: match arch.backbone {
                BackboneKind::DenseNet => Some(Bn::register(&mut store, "head.bn", c, bb)?),
                BackboneKind::ResNet => None,
            },
            fc_w: store.add("head.fc.weight", bb, kaiming_normal(&[arch.num_classes, c], c, rng))?,
            fc_b: store.add("head.fc.bias", bb, Tensor::zeros(&[arch.num_classes]))?,
        };
        ledger.head = costmodel::global_pool_cost(c, h, w)? + costmodel::fc_cost(c, arch.num_classes, &tiling)?;

        Ok(Network {
            arch: arch.clone(),
            store,
            stem,
            units,
            branches,
            head,
            layer_gate,
            ledger,
            norm_mean,
            norm_std,
            warnings,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.arch.in_channels, self.arch.input_size, self.arch.input_size]
    }

    pub fn gated_units(&self) -> impl Iterator<Item = usize> + '_ {
        self.units.iter().enumerate().filter(|(_, u)| u.is_gated()).map(|(i, _)| i)
    }

    pub fn num_exits(&self) -> usize {
        self.branches.len() + 1
    }

    /// Per-channel input normalization `(mean, std)` stored with the weights.
    pub fn norm_stats(&self) -> (Vec<f32>, Vec<f32>) {
        (self.store.get(self.norm_mean).value.data().to_vec(), self.store.get(self.norm_std).value.data().to_vec())
    }

    pub fn set_norm_stats(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        let c = self.arch.in_channels;
        self.store.set_value(self.norm_mean, Tensor::new(vec![c], mean.to_vec())?)?;
        self.store.set_value(self.norm_std, Tensor::new(vec![c], std.to_vec())?)
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates<T: Real>(&mut self, updates: &[BnUpdate<T>]) {
        let m = BN_MOMENTUM;
        for u in updates {
            for (id, src) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let p = self.store.get_mut(id);
                for (r, &b) in p.value.data_mut().iter_mut().zip(src.iter()) {
                    *r = (1.0 - m) * *r + m * b.as_f64() as f32;
                }
            }
        }
    }

    pub fn checkpoint(&self, with_momentum: bool) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(&self.store, self.arch.to_toml()?, with_momentum))
    }

    /// Rebuilds the network described by a checkpoint and loads its tensors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Network> {
        let arch = ArchConfig::from_toml(&ck.meta).map_err(|e| Error::Checkpoint(format!("architecture header: {}", e)))?;
        let mut net = Network::build(&arch, 0)?;
        ck.load_into(&mut net.store)?;
        Ok(net)
    }

    pub fn stem_forward<T: Real>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_>, x: Var, bn: &mut BnCtx<T>) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4("network input")?;
        if [c, h, w] != self.input_shape() {
            return Err(Error::shape("network input", format!("{:?} vs expected {:?}", [c, h, w], self.input_shape())));
        }
        let wv = binder.bind(tape, self.stem.conv);
        let y = tape.conv2d(x, wv, 1, 1)?;
        match &self.stem.bn {
            Some(b) => {
                let y = bn_apply(tape, binder, b, y, bn)?;
                tape.relu(y)
            }
            None => Ok(y),
        }
    }

    fn gates_of(&self, unit: usize) -> Result<&UnitGates> {
        self.units[unit]
            .gates
            .as_ref()
            .ok_or_else(|| Error::Config(format!("unit `{}` has no gates", self.units[unit].name)))
    }

    pub fn initial_gate_state<T: Real>(&self, tape: &mut Tape<T>, n: usize) -> LstmState {
        self.layer_gate.initial_state(tape, n)
    }

    /// Layer-gate soft value `[N, 1]` for `unit` given its input.
    pub fn layer_gate_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_>,
        unit: usize,
        feature: Var,
        state: LstmState,
    ) -> Result<(Var, LstmState)> {
        layer_gate_step(tape, binder, &self.layer_gate, &self.gates_of(unit)?.layer, feature, state)
    }

    /// Channel-gate soft values `[N, k]` for `unit` given its input.
    pub fn channel_gate_forward<T: Real>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_>, unit: usize, feature: Var) -> Result<Var> {
        channel_gate_eval(tape, binder, &self.gates_of(unit)?.channel, feature)
    }

    /// What the unit computes when it runs: the full block output for a
    /// residual block, the `g` new channels for a dense layer, the
    /// downsampled map for a transition.
    pub fn unit_body<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_>,
        unit: usize,
        x: Var,
        bn: &mut BnCtx<T>,
    ) -> Result<Var> {
        match &self.units[unit].kind {
            UnitKind::Residual { conv1, conv2, shortcut } => {
                let h = conv1.forward(tape, binder, x, bn)?;
                let h = tape.relu(h)?;
                let h = conv2.forward(tape, binder, h, bn)?;
                let sc = match shortcut {
                    Some(s) => s.forward(tape, binder, x, bn)?,
                    None => x,
                };
                let s = tape.add(h, sc)?;
                tape.relu(s)
            }
            UnitKind::Dense { bn1, conv1, bn2, conv2, .. } => {
                let h = bn_apply(tape, binder, bn1, x, bn)?;
                let h = tape.relu(h)?;
                let w1 = binder.bind(tape, *conv1);
                let h = tape.conv2d(h, w1, 1, 0)?;
                let h = bn_apply(tape, binder, bn2, h, bn)?;
                let h = tape.relu(h)?;
                let w2 = binder.bind(tape, *conv2);
                tape.conv2d(h, w2, 1, 1)
            }
            UnitKind::Transition { bn: b, conv } => {
                let h = bn_apply(tape, binder, b, x, bn)?;
                let h = tape.relu(h)?;
                let w = binder.bind(tape, *conv);
                let h = tape.conv2d(h, w, 1, 0)?;
                tape.avg_pool2d(h, 2, 2)
            }
        }
    }

    /// What a skipped unit produces instead of its body.
    pub fn unit_fallback<T: Real>(&self, tape: &mut Tape<T>, unit: usize, x: Var) -> Result<Var> {
        match &self.units[unit].kind {
            UnitKind::Dense { growth, .. } => {
                let c = tape.value(x).shape()[1];
                if c < *growth {
                    return Err(Error::shape("dense fallback", format!("{} input channels < growth {}", c, growth)));
                }
                tape.slice_channels(x, c - growth, *growth)
            }
            UnitKind::Residual { .. } => Ok(x),
            UnitKind::Transition { .. } => Err(Error::Config("transitions have no fallback".into())),
        }
    }

    /// Next feature map given the unit input and what the unit produced.
    pub fn unit_merge<T: Real>(&self, tape: &mut Tape<T>, unit: usize, x: Var, produced: Var) -> Result<Var> {
        match &self.units[unit].kind {
            UnitKind::Dense { .. } => tape.concat_channels(&[x, produced]),
            _ => Ok(produced),
        }
    }

    pub fn branch_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_>,
        branch: usize,
        x: Var,
        bn: &mut BnCtx<T>,
    ) -> Result<Var> {
        let b = &self.branches[branch];
        let mut h = x;
        for cb in &b.trunk {
            h = tape.max_pool2d(h, 2, 2)?;
            h = cb.forward(tape, binder, h, bn)?;
            h = tape.relu(h)?;
        }
        let p = tape.global_avg_pool(h)?;
        let (w, bias) = (binder.bind(tape, b.fc_w), binder.bind(tape, b.fc_b));
        tape.linear(p, w, Some(bias))
    }

    pub fn head_forward<T: Real>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_>, x: Var, bn: &mut BnCtx<T>) -> Result<Var> {
        let mut h = x;
        if let Some(b) = &self.head.bn {
            h = bn_apply(tape, binder, b, h, bn)?;
            h = tape.relu(h)?;
        }
        let p = tape.global_avg_pool(h)?;
        let (w, bias) = (binder.bind(tape, self.head.fc_w), binder.bind(tape, self.head.fc_b));
        tape.linear(p, w, Some(bias))
    }

    /// Forward pass over a batch producing every requested exit.
    ///
    /// Hard mode needs a tape without gradient recording, since binarized
    /// gates have no useful derivative.
    pub fn full_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_>,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass<T>> {
        if opts.gates == GateMode::Hard && tape.grad_enabled() {
            return Err(Error::NonDifferentiable(
                "hard (binarized) gates cannot sit on a gradient-recording tape".into(),
            ));
        }
        let n = tape.value(x).shape().first().copied().unwrap_or(0);
        let mut bn = BnCtx::new(opts.bn_train);
        let mut feature = self.stem_forward(tape, binder, x, &mut bn)?;
        let mut state = self.initial_gate_state(tape, n);
        let mut exits = Vec::new();
        let mut soft_gates = Vec::new();
        let mut gate_values = Vec::new();
        let mut traces: Vec<SkipTrace> = (0..n).map(|_| SkipTrace::default()).collect();
        let mut next_branch = 0;
        let mut features = Vec::with_capacity(self.units.len());

        for (ui, unit) in self.units.iter().enumerate() {
            let body = self.unit_body(tape, binder, ui, feature, &mut bn)?;
            let produced = if unit.is_gated() && opts.gates != GateMode::Open {
                let (l, next) = self.layer_gate_forward(tape, binder, ui, feature, state)?;
                state = next;
                let c = self.channel_gate_forward(tape, binder, ui, feature)?;
                let k = unit.gated_channels();
                let lv: Vec<f64> = tape.value(l).data().iter().map(|v| v.as_f64()).collect();
                let cv: Vec<f64> = tape.value(c).data().iter().map(|v| v.as_f64()).collect();
                for (s, t) in traces.iter_mut().enumerate() {
                    let layer = gating::binarize(lv[s] as f32);
                    let channels = layer.then(|| cv[s * k..(s + 1) * k].iter().map(|&v| gating::binarize(v as f32)).collect());
                    t.units.push(UnitTrace { unit: ui, gated: true, layer: Some(layer), channels });
                }
                let fallback = self.unit_fallback(tape, ui, feature)?;
                let out = match opts.gates {
                    GateMode::Soft => mgl2s_combine(tape, body, fallback, l, c)?,
                    _ => {
                        let g = Tensor::from_fn(&[n, k], |i| {
                            let on = traces[i / k].units[ui].channels.as_ref().is_some_and(|ch| ch[i % k]);
                            if on { T::one() } else { T::zero() }
                        });
                        let g = tape.constant(g);
                        tape.blend_channels(body, fallback, g)?
                    }
                };
                soft_gates.push(SoftGates { unit: ui, layer: l, channels: c });
                gate_values.push(UnitGateValues { unit: ui, layer: lv, channels: cv, k });
                out
            } else {
                for t in traces.iter_mut() {
                    t.units.push(if unit.is_gated() {
                        UnitTrace { unit: ui, gated: true, layer: Some(true), channels: Some(vec![true; unit.gated_channels()]) }
                    } else {
                        UnitTrace::ungated(ui)
                    });
                }
                body
            };
            feature = self.unit_merge(tape, ui, feature, produced)?;
            features.push(feature);
            while next_branch < self.branches.len() && self.branches[next_branch].after_unit == ui {
                if opts.branches {
                    exits.push(self.branch_forward(tape, binder, next_branch, feature, &mut bn)?);
                    for t in traces.iter_mut() {
                        t.branches.push(next_branch);
                    }
                }
                next_branch += 1;
            }
        }
        exits.push(self.head_forward(tape, binder, feature, &mut bn)?);
        for t in traces.iter_mut() {
            t.head = true;
        }
        Ok(ForwardPass { exits, soft_gates, gate_values, bn_updates: bn.updates, traces, features })
    }

    /// Hard-mode inference over a batch with batchnorm in eval mode.
    pub fn infer_batch(&self, images: &Tensor, gates: GateMode) -> Result<(Vec<Tensor>, Vec<SkipTrace>)> {
        let mut tape = Tape::<f32>::inference();
        let mut binder = Binder::new(&self.store, &[]);
        let x = tape.constant(images.clone());
        let pass = self.full_forward(&mut tape, &mut binder, x, &ForwardOptions::eval(gates))?;
        let logits = pass.exits.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((logits, pass.traces))
    }

    /// Hard bits of one sample from recorded gate values.
    pub fn gate_hard_bits(values: &UnitGateValues, sample: usize) -> HardGate {
        let layer = gating::binarize(values.layer[sample] as f32);
        let channels = values.channels[sample * values.k..(sample + 1) * values.k]
            .iter()
            .map(|&v| gating::binarize(v as f32))
            .collect();
        HardGate { layer, channels }
    }
}
