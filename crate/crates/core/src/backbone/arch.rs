use serde::{Deserialize, Serialize};

use crate::costmodel::Tiling;
use crate::error::{Error, Result};
use crate::gating::GateInit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    ResNet,
    DenseNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSettings {
    #[serde(default = "default_width")]
    pub lstm_hidden: usize,
    #[serde(default = "default_width")]
    pub reduce: usize,
    #[serde(default = "default_std")]
    pub weight_std: f64,
    #[serde(default = "default_hidden_std")]
    pub hidden_std: f64,
    #[serde(default = "default_bias")]
    pub final_bias: f32,
}

/// Toy networks are shallow enough that 0.01 internal gate weights leave the
/// gates input-independent; a wider init lets the input reach the decision.
const TOY_HIDDEN_STD: f64 = 0.3;

fn default_width() -> usize {
    10
}
fn default_std() -> f64 {
    GateInit::default().weight_std
}
fn default_hidden_std() -> f64 {
    GateInit::default().hidden_std
}
fn default_bias() -> f32 {
    GateInit::default().final_bias
}

impl Default for GateSettings {
    fn default() -> Self {
        GateSettings { lstm_hidden: 10, reduce: 10, weight_std: default_std(), hidden_std: default_hidden_std(), final_bias: default_bias() }
    }
}

impl GateSettings {
    pub fn init(&self) -> GateInit {
        GateInit { weight_std: self.weight_std, hidden_std: self.hidden_std, final_bias: self.final_bias }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSettings {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Explicit 1-based layer positions per stage; quarter/three-quarter
    /// placement when absent.
    #[serde(default)]
    pub positions: Option<Vec<Vec<usize>>>,
}

fn yes() -> bool {
    true
}

impl Default for BranchSettings {
    fn default() -> Self {
        BranchSettings { enabled: true, positions: None }
    }
}

/// Declarative architecture description; stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub backbone: BackboneKind,
    /// Residual blocks per stage, or dense layers per dense block.
    pub blocks: Vec<usize>,
    /// Stage widths (residual backbones).
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Growth rate (dense backbones).
    #[serde(default)]
    pub growth: usize,
    #[serde(default = "half")]
    pub compression: f64,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub gates: GateSettings,
    #[serde(default)]
    pub branches: BranchSettings,
    #[serde(default)]
    pub tiling: Tiling,
}

fn half() -> f64 {
    0.5
}

impl ArchConfig {
    /// Residual network of depth `6n + 2` on 32×32 RGB inputs, widths 16/32/64.
    pub fn resnet(depth: usize, num_classes: usize) -> Result<Self> {
        if depth < 8 || (depth - 2) % 6 != 0 {
            return Err(Error::Config(format!("residual depth {} is not of the form 6n + 2", depth)));
        }
        let n = (depth - 2) / 6;
        Ok(Self::resnet_custom(vec![n; 3], vec![16, 32, 64], 3, 32, num_classes))
    }

    pub fn resnet_custom(blocks: Vec<usize>, widths: Vec<usize>, in_channels: usize, input_size: usize, num_classes: usize) -> Self {
        ArchConfig {
            backbone: BackboneKind::ResNet,
            blocks,
            widths,
            growth: 0,
            compression: 0.5,
            in_channels,
            input_size,
            num_classes,
            gates: GateSettings::default(),
            branches: BranchSettings::default(),
            tiling: Tiling::default(),
        }
    }

    /// Bottleneck-compressed dense network of depth `6n + 4` on 32×32 RGB inputs.
    pub fn densenet(depth: usize, growth: usize, num_classes: usize) -> Result<Self> {
        if depth < 10 || (depth - 4) % 6 != 0 {
            return Err(Error::Config(format!("dense depth {} is not of the form 6n + 4", depth)));
        }
        let n = (depth - 4) / 6;
        Ok(Self::densenet_custom(vec![n; 3], growth, 3, 32, num_classes))
    }

    pub fn densenet_custom(blocks: Vec<usize>, growth: usize, in_channels: usize, input_size: usize, num_classes: usize) -> Self {
        ArchConfig {
            backbone: BackboneKind::DenseNet,
            blocks,
            widths: Vec::new(),
            growth,
            compression: 0.5,
            in_channels,
            input_size,
            num_classes,
            gates: GateSettings::default(),
            branches: BranchSettings::default(),
            tiling: Tiling::default(),
        }
    }

    /// Named presets: `resnet38`, `resnet74`, `densenet100`, `toy`, `toy-dense`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet38" => Self::resnet(38, 10),
            "resnet74" => Self::resnet(74, 10),
            "densenet100" => Self::densenet(100, 12, 10),
            "toy" => Ok(Self::resnet_custom(vec![2, 2, 2], vec![8, 16, 32], 1, 16, 2).with_hidden_std(TOY_HIDDEN_STD)),
            "toy-dense" => Ok(Self::densenet_custom(vec![4, 4, 4], 8, 1, 16, 2).with_hidden_std(TOY_HIDDEN_STD)),
            other => Err(Error::Config(format!(
                "unknown architecture preset `{}` (resnet38, resnet74, densenet100, toy, toy-dense)",
                other
            ))),
        }
    }

    fn with_hidden_std(mut self, std: f64) -> Self {
        self.gates.hidden_std = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return bad(format!("every stage needs at least one block, got {:?}", self.blocks));
        }
        if self.in_channels == 0 || self.input_size == 0 || self.num_classes < 2 {
            return bad("input channels, input size and at least two classes are required".into());
        }
        if self.gates.lstm_hidden == 0 || self.gates.reduce == 0 {
            return bad("gate widths must be positive".into());
        }
        let downsamples = self.blocks.len() - 1;
        if self.input_size >> downsamples == 0 {
            return bad(format!("input size {} is too small for {} stages", self.input_size, self.blocks.len()));
        }
        match self.backbone {
            BackboneKind::ResNet => {
                if self.widths.len() != self.blocks.len() || self.widths.contains(&0) {
                    return bad(format!("need one positive width per stage, got {:?}", self.widths));
                }
            }
            BackboneKind::DenseNet => {
                if self.growth == 0 {
                    return bad("growth rate must be positive".into());
                }
                if !(self.compression > 0.0 && self.compression <= 1.0) {
                    return bad(format!("compression {} outside (0, 1]", self.compression));
                }
            }
        }
        if let Some(p) = &self.branches.positions {
            if p.len() != self.blocks.len() {
                return bad("explicit branch positions need one list per stage".into());
            }
            for (s, (pos, &d)) in p.iter().zip(&self.blocks).enumerate() {
                if pos.iter().any(|&x| x == 0 || x > d) || pos.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!("branch positions {:?} invalid for stage {} of depth {}", pos, s + 1, d));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let a: ArchConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        a.validate()?;
        Ok(a)
    }
}

/// Rounds half away from zero.
fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// 1-based layer positions within a stage of `depth` layers, at roughly a
/// quarter and three quarters of the depth. Returns a warning when the stage
/// is too shallow for two distinct positions.
pub fn branch_positions(depth: usize) -> (Vec<usize>, Option<String>) {
    if depth < 2 {
        return (Vec::new(), Some(format!("stage of {} layer has no interior branch position", depth)));
    }
    let clamp = |p: usize| p.clamp(1, depth - 1);
    let mut pos = vec![clamp(round_half_away(depth as f64 / 4.0)), clamp(round_half_away(3.0 * depth as f64 / 4.0))];
    pos.dedup();
    let warning = (pos.len() < 2).then(|| format!("stage of {} layers fits only one branch, placed after layer {}", depth, pos[0]));
    (pos, warning)
}
