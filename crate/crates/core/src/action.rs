//! Continuous 7-dim motor command shared across the stack.

use serde::{Deserialize, Serialize};

pub const ACTION_DIMS: usize = 7;

/// Names of the six pose dimensions plus gripper, CSV/report order.
pub const ACTION_LABELS: [&str; ACTION_DIMS] = ["dx", "dy", "dz", "dphi", "dtheta", "dpsi", "gripper"];

/// Per-tick pose deltas plus a gripper target.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionCommand {
    /// [Δx, Δy, Δz, Δφ, Δθ, Δψ] in meters / radians per tick.
    pub deltas: [f64; 6],
    /// Target aperture in [0, 1].
    pub gripper: f64,
}

impl ActionCommand {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut deltas = [0.0; 6];
        deltas.copy_from_slice(&v[..6]);
        ActionCommand {
            deltas,
            gripper: v[6],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.deltas.to_vec();
        v.push(self.gripper);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.deltas.iter().all(|d| d.is_finite()) && self.gripper.is_finite()
    }

    /// Clamp each pose delta to ±limit and the gripper into [0, 1].
    pub fn clamped(&self, limit: f64) -> Self {
        let mut deltas = self.deltas;
        for d in &mut deltas {
            *d = d.clamp(-limit, limit);
        }
        ActionCommand {
            deltas,
            gripper: self.gripper.clamp(0.0, 1.0),
        }
    }
}
