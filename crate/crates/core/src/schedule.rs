//! Learning-rate and subnet-gradient-scale schedules.

use serde::{Deserialize, Serialize};

/// Warmup of the subnet gradient scale: starts at `epsilon0`, climbs by a
/// constant increment per shrink-phase optimizer step, and saturates at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub epsilon0: f64,
    pub warmup_steps: u64,
}

impl EpsilonSchedule {
    pub fn new(epsilon0: f64, warmup_steps: u64) -> Self {
        EpsilonSchedule {
            epsilon0,
            warmup_steps,
        }
    }

    /// `min(1, epsilon0 + t * (1 - epsilon0) / warmup_steps)`, exactly 1 from
    /// `t = warmup_steps` on.
    pub fn epsilon_at(&self, t: u64) -> f64 {
        if t >= self.warmup_steps {
            return 1.0;
        }
        self.epsilon0 + t as f64 * (1.0 - self.epsilon0) / self.warmup_steps as f64
    }
}

/// Cosine annealing, optionally clamped to a constant ending floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrKind {
    Cosine,
    CosineConstantEnding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub eta0: f64,
    pub total_steps: u64,
    /// Floor as a fraction of `eta0` for the constant ending.
    pub floor_fraction: f64,
}

impl LrSchedule {
    pub fn cosine(eta0: f64, total_steps: u64) -> Self {
        LrSchedule {
            kind: LrKind::Cosine,
            eta0,
            total_steps,
            floor_fraction: 0.05,
        }
    }

    pub fn cosine_constant_ending(eta0: f64, total_steps: u64, floor_fraction: f64) -> Self {
        LrSchedule {
            kind: LrKind::CosineConstantEnding,
            eta0,
            total_steps,
            floor_fraction,
        }
    }

    /// `eta0 * (1 + cos(pi * t / total_steps)) / 2`, clamped to the floor
    /// for the constant-ending variant.
    pub fn eta_at(&self, t: u64) -> f64 {
        let frac = (t as f64 / self.total_steps as f64).min(1.0);
        let cos = self.eta0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
        match self.kind {
            LrKind::Cosine => cos,
            LrKind::CosineConstantEnding => cos.max(self.floor_fraction * self.eta0),
        }
    }
}
