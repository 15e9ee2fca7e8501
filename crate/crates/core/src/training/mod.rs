//! Phase-wise training of gated networks and held-out evaluation.

mod eval;
mod phases;

pub use eval::{evaluate, EvalMetrics, ExitAccuracy};
pub use phases::{ddi_finetune, fit_normalization, iadi_joint_phase, multi_exit_loss, pretrain, warmup_phase, PhaseReport};

use serde::{Deserialize, Serialize};

use crate::data::Augment;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Magnitude of the resource-loss weight in the joint phase.
    pub alpha: f64,
    /// Magnitude of the negative resource-loss weight during warm-up.
    pub warmup_alpha: f64,
    pub target_skip: f64,
    pub pretrain_iterations: usize,
    /// Upper bound on warm-up iterations.
    pub warmup_iterations: usize,
    pub iadi_iterations: usize,
    pub ddi_iterations: usize,
    /// Warm-up ends once the batch skip ratio stays below this value ...
    pub warmup_tolerance: f64,
    /// ... for this many consecutive batches.
    pub warmup_window: usize,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            alpha: 2e-4,
            warmup_alpha: 2e-4,
            target_skip: 0.5,
            pretrain_iterations: 2000,
            warmup_iterations: 1000,
            iadi_iterations: 2000,
            ddi_iterations: 1000,
            warmup_tolerance: 0.02,
            warmup_window: 100,
            augment: Augment::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Named schedules: `default` carries the published hyperparameters,
    /// `toy` a short desk-scale schedule for the toy networks.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "cifar" => Ok(TrainConfig::default()),
            "toy" => Ok(TrainConfig {
                batch_size: 64,
                alpha: 0.2,
                warmup_alpha: 1.0,
                pretrain_iterations: 600,
                warmup_iterations: 1000,
                iadi_iterations: 1500,
                ddi_iterations: 300,
                ..TrainConfig::default()
            }),
            other => Err(Error::Config(format!("unknown training preset `{}` (default, cifar, toy)", other))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        for (name, v) in [("lr", self.lr), ("alpha", self.alpha), ("warmup_alpha", self.warmup_alpha), ("warmup_tolerance", self.warmup_tolerance)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{} must be positive and finite, got {}", name, v));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{} must be non-negative, got {}", name, v));
            }
        }
        if self.momentum >= 1.0 {
            return bad("momentum must be below 1");
        }
        if !(0.0..=1.0).contains(&self.target_skip) {
            return bad(&format!("target skip ratio {} is outside [0, 1]", self.target_skip));
        }
        if self.batch_size == 0 || self.warmup_window == 0 {
            return bad("batch size and warm-up window must be positive");
        }
        Ok(())
    }
}

/// Flips the sign of the resource-loss weight to steer the batch skip ratio
/// toward a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaController {
    pub magnitude: f64,
    pub target: f64,
    /// `+1` penalizes cost, `-1` rewards it.
    pub sign: f64,
}

impl AlphaController {
    /// Starts positive so the first batches are pushed toward skipping.
    pub fn new(magnitude: f64, target: f64) -> Self {
        AlphaController { magnitude: magnitude.abs(), target, sign: 1.0 }
    }

    /// Updates the sign from a batch skip ratio and returns the signed weight.
    /// A ratio equal to the target keeps the previous sign.
    pub fn update(&mut self, ratio: f64) -> f64 {
        if ratio < self.target {
            self.sign = 1.0;
        } else if ratio > self.target {
            self.sign = -1.0;
        }
        self.alpha()
    }

    pub fn alpha(&self) -> f64 {
        self.sign * self.magnitude
    }

    /// Replays a recorded skip-ratio series into the sign sequence.
    pub fn replay(magnitude: f64, target: f64, ratios: &[f64]) -> Vec<f64> {
        let mut c = AlphaController::new(magnitude, target);
        ratios.iter().map(|&r| c.update(r)).collect()
    }
}

/// One training step's loss terms, written as a JSON line per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub phase: String,
    pub iteration: usize,
    /// Cross-entropy of the final head.
    pub task_loss: f64,
    /// Differentiable expected cost; zero when the phase has no resource term.
    pub resource_loss: f64,
    pub alpha: f64,
    pub total: f64,
    /// Cross-entropy of every exit, branches first; empty outside fine-tuning.
    pub exit_losses: Vec<f64>,
    pub skip_ratio: f64,
    pub lr: f64,
}
