use serde::{Deserialize, Serialize};

/// Hard gate decisions for one unit of the backbone on one input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitTrace {
    pub unit: usize,
    pub gated: bool,
    /// Layer-gate bit; `None` for ungated units.
    pub layer: Option<bool>,
    /// Channel bits; present only when the layer gate fired 1.
    pub channels: Option<Vec<bool>>,
}

impl UnitTrace {
    pub fn ungated(unit: usize) -> Self {
        UnitTrace { unit, gated: false, layer: None, channels: None }
    }

    /// Fraction of the unit's output channels that were computed.
    pub fn executed_fraction(&self) -> f64 {
        if !self.gated {
            return 1.0;
        }
        match (self.layer, &self.channels) {
            (Some(true), Some(ch)) if !ch.is_empty() => {
                ch.iter().filter(|&&b| b).count() as f64 / ch.len() as f64
            }
            (Some(true), _) => 1.0,
            _ => 0.0,
        }
    }

    /// A skipped layer counts as one whole skipped unit; otherwise each of the
    /// `k` channel decisions counts `1/k`.
    pub fn skip_amount(&self) -> f64 {
        1.0 - self.executed_fraction()
    }
}

/// Gates of a unit that ran before inference halted ahead of its body.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaltedGates {
    pub unit: usize,
    /// Whether the channel gate ran after the layer gate fired.
    pub channel_gate: bool,
}

/// Per-input record of what ran: unit decisions, evaluated branches and
/// whether the final head ran.
///
/// A run that halted early lists only the units it finished, and `halted`
/// names gates of the next unit that ran without its body.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipTrace {
    pub units: Vec<UnitTrace>,
    /// Indices into the network's branch list, in evaluation order.
    pub branches: Vec<usize>,
    pub head: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<HaltedGates>,
}

impl SkipTrace {
    /// Mean skip amount over gated units; zero when nothing is gated.
    pub fn skip_ratio(&self) -> f64 {
        let gated: Vec<f64> = self.units.iter().filter(|u| u.gated).map(UnitTrace::skip_amount).collect();
        if gated.is_empty() {
            0.0
        } else {
            gated.iter().sum::<f64>() / gated.len() as f64
        }
    }
}
