//! Kinematic plant and task suite.
//!
//! Velocity-command plant, no inertia: pose integrates clamped per-tick
//! deltas, contact with a stiff plane produces a spring wrench, and joint
//! proxies are a fixed analytic function of pose so the proprioceptive
//! vector has a full layout. The claims under test here are about the
//! controller, not rigid-body dynamics.

use crate::action::ActionCommand;
use crate::cerebellar::StateVector;
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError, TensorResult};
use serde::{Deserialize, Serialize};

type T64 = Tensor<f64>;

pub const POSE_DIMS: usize = 6;
pub const JOINTS: usize = 6;

/// Fixed synthetic joint map: joints = M · pose. Banded and well-conditioned
/// so pose motion is visible on several joint channels.
const JOINT_MAP: [[f64; POSE_DIMS]; JOINTS] = [
    [1.0, 0.3, 0.0, 0.0, 0.0, 0.0],
    [0.3, 1.0, 0.3, 0.0, 0.0, 0.0],
    [0.0, 0.3, 1.0, 0.3, 0.0, 0.0],
    [0.0, 0.0, 0.3, 1.0, 0.3, 0.0],
    [0.0, 0.0, 0.0, 0.3, 1.0, 0.3],
    [0.0, 0.0, 0.0, 0.0, 0.3, 1.0],
];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// Control ticks per second.
    pub control_hz: f64,
    /// Wrench sub-samples recorded per control tick.
    pub wrench_rate_mult: usize,
    /// Per-tick pose delta clamp (m or rad).
    pub delta_clamp: f64,
    /// Max gripper aperture change per tick.
    pub gripper_rate: f64,
    /// Seeded noise added to a nonzero contact wrench.
    pub contact_noise: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            control_hz: 50.0,
            wrench_rate_mult: 4,
            delta_clamp: 0.02,
            gripper_rate: 0.2,
            contact_noise: 0.02,
        }
    }
}

/// Halfspace obstacle: the unit `normal` points out of the material into
/// free space; `stiffness` converts penetration depth into reaction force.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub stiffness: f64,
}

impl Obstacle {
    /// Penetration depth of `p` behind the surface; positive inside.
    fn penetration(&self, p: &[f64]) -> f64 {
        let mut along = 0.0;
        for c in 0..3 {
            along += (p[c] - self.point[c]) * self.normal[c];
        }
        -along
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// [x, y, z, φ, θ, ψ]
    pub pose: [f64; POSE_DIMS],
    pub gripper: f64,
    pub joints: [f64; JOINTS],
    pub joint_velocities: [f64; JOINTS],
    pub wrench: [f64; 6],
    pub tick: usize,
}

impl PlantState {
    pub fn at_pose(pose: [f64; POSE_DIMS]) -> Self {
        PlantState {
            pose,
            gripper: 0.0,
            joints: joint_proxy(&pose),
            joint_velocities: [0.0; JOINTS],
            wrench: [0.0; 6],
            tick: 0,
        }
    }

    pub fn to_state_vector(&self) -> StateVector {
        StateVector {
            joint_angles: self.joints.to_vec(),
            joint_velocities: self.joint_velocities.to_vec(),
            wrench: self.wrench,
            gripper: self.gripper,
        }
    }
}

pub fn joint_proxy(pose: &[f64; POSE_DIMS]) -> [f64; JOINTS] {
    let mut joints = [0.0; JOINTS];
    for (j, row) in JOINT_MAP.iter().enumerate() {
        joints[j] = row.iter().zip(pose.iter()).map(|(m, p)| m * p).sum();
    }
    joints
}

/// One plant per episode, single owner.
#[derive(Debug, Clone)]
pub struct Plant {
    pub cfg: PlantConfig,
    pub state: PlantState,
    pub obstacles: Vec<Obstacle>,
    rng: Rng,
    /// Wrench sub-samples produced by the latest step, oldest first.
    last_subsamples: Vec<[f64; 6]>,
}

impl Plant {
    pub fn new(cfg: PlantConfig, start: [f64; POSE_DIMS], obstacles: Vec<Obstacle>, seed: u64) -> Self {
        Plant {
            cfg,
            state: PlantState::at_pose(start),
            obstacles,
            rng: Rng::seed_from(seed),
            last_subsamples: vec![[0.0; 6]; cfg.wrench_rate_mult],
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.cfg.control_hz
    }

    /// Integrate one control tick. Penetration into an obstacle is blocked
    /// along the surface normal and converted into a spring wrench.
    pub fn step(&mut self, action: &ActionCommand) -> &PlantState {
        let a = action.clamped(self.cfg.delta_clamp);
        let mut pose = self.state.pose;
        for c in 0..POSE_DIMS {
            pose[c] += a.deltas[c];
        }

        let mut wrench = [0.0; 6];
        for obs in &self.obstacles {
            let depth = obs.penetration(&pose);
            if depth > 0.0 {
                // Push the pose back to the surface; reaction along normal.
                for c in 0..3 {
                    pose[c] += depth * obs.normal[c];
                }
                for c in 0..3 {
                    wrench[c] += obs.stiffness * depth * obs.normal[c];
                }
            }
        }
        let in_contact = wrench.iter().any(|&w| w != 0.0);
        if in_contact && self.cfg.contact_noise > 0.0 {
            for w in wrench.iter_mut().take(3) {
                *w += self.rng.normal_scaled(self.cfg.contact_noise);
            }
        }

        let gripper_target = a.gripper;
        let step = (gripper_target - self.state.gripper)
            .clamp(-self.cfg.gripper_rate, self.cfg.gripper_rate);
        let gripper = (self.state.gripper + step).clamp(0.0, 1.0);

        let joints = joint_proxy(&pose);
        let dt = self.dt();
        let mut joint_velocities = [0.0; JOINTS];
        for j in 0..JOINTS {
            joint_velocities[j] = (joints[j] - self.state.joints[j]) / dt;
        }

        // High-rate wrench channel: sub-samples share the tick's contact
        // value, with independent sensor noise when in contact.
        self.last_subsamples.clear();
        for _ in 0..self.cfg.wrench_rate_mult {
            let mut sub = wrench;
            if in_contact && self.cfg.contact_noise > 0.0 {
                for s in sub.iter_mut().take(3) {
                    *s += self.rng.normal_scaled(self.cfg.contact_noise);
                }
            }
            self.last_subsamples.push(sub);
        }

        self.state = PlantState {
            pose,
            gripper,
            joints,
            joint_velocities,
            wrench,
            tick: self.state.tick + 1,
        };
        &self.state
    }

    pub fn wrench_subsamples(&self) -> &[[f64; 6]] {
        &self.last_subsamples
    }
}

// ── Task suite ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Minimum-jerk positioning toward a target pose.
    Reach {
        target: [f64; POSE_DIMS],
        duration: usize,
    },
    StaticHold,
    /// Sinusoidal oscillation on one pose axis: offset A·(1 − cos ωt),
    /// exactly `cycles` periods, then still.
    Shake {
        axis: usize,
        amplitude: f64,
        period_ticks: usize,
        cycles: usize,
    },
    /// Pose frozen, gripper follows a square wave.
    StaticPoseDynamicGripper {
        period: usize,
        low: f64,
        high: f64,
    },
    /// Constant-rate approach that will run into an obstacle.
    CollisionCourse {
        direction: [f64; 3],
        speed: f64,
    },
    /// Cue shown early, correct response direction required `respond_from`
    /// ticks later; probes temporal memory.
    DelayedCue {
        cue_ticks: usize,
        respond_from: usize,
        axis: usize,
        sign: f64,
        magnitude: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub start: [f64; POSE_DIMS],
    pub ticks: usize,
}

impl TaskSpec {
    pub fn phase_label(&self, tick: usize) -> &'static str {
        match &self.kind {
            TaskKind::StaticHold => "static_hold",
            TaskKind::Reach { duration, .. } => {
                if tick < *duration {
                    "dynamic"
                } else {
                    "static_hold"
                }
            }
            TaskKind::Shake {
                period_ticks,
                cycles,
                ..
            } => {
                if tick < period_ticks * cycles {
                    "dynamic"
                } else {
                    "static_hold"
                }
            }
            TaskKind::StaticPoseDynamicGripper { .. } => "dynamic",
            TaskKind::CollisionCourse { .. } => "dynamic",
            TaskKind::DelayedCue { respond_from, .. } => {
                if tick < *respond_from {
                    "static_hold"
                } else {
                    "dynamic"
                }
            }
        }
    }
}

fn min_jerk_fraction(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Nominal pose of a task at a tick: where the expert wants to be.
pub fn nominal_pose(task: &TaskSpec, tick: usize) -> [f64; POSE_DIMS] {
    match &task.kind {
        TaskKind::Reach { target, duration } => {
            let s = if *duration == 0 {
                1.0
            } else {
                min_jerk_fraction(tick as f64 / *duration as f64)
            };
            let mut pose = task.start;
            for c in 0..POSE_DIMS {
                pose[c] += (target[c] - task.start[c]) * s;
            }
            pose
        }
        TaskKind::Shake {
            axis,
            amplitude,
            period_ticks,
            cycles,
        } => {
            let total = period_ticks * cycles;
            let t = tick.min(total);
            let omega = std::f64::consts::TAU / *period_ticks as f64;
            let mut pose = task.start;
            pose[*axis] += amplitude * (1.0 - (omega * t as f64).cos());
            pose
        }
        _ => task.start,
    }
}

/// Ground-truth supervisor for behavior cloning and figure protocols.
/// Trajectory tasks track their nominal profile: the command is the step to
/// the next tick's nominal pose from wherever the plant actually is, so the
/// corrective response to perturbations is part of every demonstration.
pub fn expert_action(task: &TaskSpec, state: &PlantState) -> ActionCommand {
    let t = state.tick;
    let track = |next: [f64; POSE_DIMS]| -> [f64; POSE_DIMS] {
        let mut deltas = [0.0; POSE_DIMS];
        for c in 0..POSE_DIMS {
            deltas[c] = next[c] - state.pose[c];
        }
        deltas
    };
    match &task.kind {
        TaskKind::StaticHold => ActionCommand {
            deltas: track(task.start),
            gripper: state.gripper,
        },
        TaskKind::Reach { .. } | TaskKind::Shake { .. } => ActionCommand {
            deltas: track(nominal_pose(task, t + 1)),
            gripper: state.gripper,
        },
        TaskKind::StaticPoseDynamicGripper { period, low, high } => {
            let target = if (t / period).is_multiple_of(2) { *high } else { *low };
            ActionCommand {
                deltas: track(task.start),
                gripper: target,
            }
        }
        TaskKind::CollisionCourse { direction, speed } => {
            let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
            let mut deltas = [0.0; POSE_DIMS];
            if norm > 0.0 {
                for c in 0..3 {
                    deltas[c] = speed * direction[c] / norm;
                }
            }
            ActionCommand {
                deltas,
                gripper: state.gripper,
            }
        }
        TaskKind::DelayedCue {
            respond_from,
            axis,
            sign,
            magnitude,
            ..
        } => {
            if t < *respond_from {
                return ActionCommand::zero();
            }
            let mut deltas = [0.0; POSE_DIMS];
            deltas[*axis] = sign * magnitude;
            ActionCommand {
                deltas,
                gripper: state.gripper,
            }
        }
    }
}

// ── Noise injection ─────────────────────────────────────────────────

/// Seeded iid Gaussian jitter applied per tick per element.
#[derive(Debug, Clone)]
pub struct Tremor {
    pub sigma: f64,
    rng: Rng,
}

impl Tremor {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Tremor {
            sigma,
            rng: Rng::seed_from(seed),
        }
    }

    pub fn perturb_latent(&mut self, z: &T64) -> T64 {
        if self.sigma == 0.0 {
            return z.clone();
        }
        let sigma = self.sigma;
        let rng = &mut self.rng;
        T64::from_fn(z.shape(), |i| z.at(i) + rng.normal_scaled(sigma))
    }

    pub fn perturb_action(&mut self, a: &ActionCommand) -> ActionCommand {
        if self.sigma == 0.0 {
            return *a;
        }
        let mut out = *a;
        for d in &mut out.deltas {
            *d += self.rng.normal_scaled(self.sigma);
        }
        out
    }
}

// ── Smoothness metrics ──────────────────────────────────────────────

/// Mean absolute commanded acceleration and jerk per pose dim, treating the
/// per-tick deltas as commanded velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothness {
    pub maca: [f64; POSE_DIMS],
    pub maj: [f64; POSE_DIMS],
}

impl Smoothness {
    pub fn mean_maca(&self) -> f64 {
        self.maca.iter().sum::<f64>() / POSE_DIMS as f64
    }

    pub fn mean_maj(&self) -> f64 {
        self.maj.iter().sum::<f64>() / POSE_DIMS as f64
    }
}

pub fn smoothness_metrics(actions: &[ActionCommand]) -> TensorResult<Smoothness> {
    if actions.len() < 3 {
        return Err(TensorError::Contract {
            op: "smoothness_metrics",
            msg: format!("need at least 3 commands, got {}", actions.len()),
        });
    }
    let mut maca = [0.0; POSE_DIMS];
    let mut maj = [0.0; POSE_DIMS];
    for d in 0..POSE_DIMS {
        let vel: Vec<f64> = actions.iter().map(|a| a.deltas[d]).collect();
        let accel: Vec<f64> = vel.windows(2).map(|w| w[1] - w[0]).collect();
        let jerk: Vec<f64> = accel.windows(2).map(|w| w[1] - w[0]).collect();
        maca[d] = accel.iter().map(|a| a.abs()).sum::<f64>() / accel.len() as f64;
        maj[d] = jerk.iter().map(|j| j.abs()).sum::<f64>() / jerk.len() as f64;
    }
    Ok(Smoothness { maca, maj })
}

// ── Rhythm analysis ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhythmReport {
    pub cycles: usize,
    /// Mean tick distance between upward threshold crossings.
    pub period: Option<f64>,
}

/// Count oscillation cycles with a hysteresis state machine: a cycle needs
/// an excursion above +h and one below −h of the centered signal.
pub fn detect_cycles(signal: &[f64]) -> RhythmReport {
    if signal.len() < 4 {
        return RhythmReport {
            cycles: 0,
            period: None,
        };
    }
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let centered: Vec<f64> = signal.iter().map(|v| v - mean).collect();
    let peak = centered.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        return RhythmReport {
            cycles: 0,
            period: None,
        };
    }
    let h = 0.3 * peak;
    #[derive(PartialEq, Clone, Copy)]
    enum Arm {
        Unknown,
        High,
        Low,
    }
    let mut arm = Arm::Unknown;
    let mut ups: Vec<usize> = Vec::new();
    let mut downs = 0usize;
    for (i, &v) in centered.iter().enumerate() {
        if v > h && arm != Arm::High {
            if arm == Arm::Low || arm == Arm::Unknown {
                ups.push(i);
            }
            arm = Arm::High;
        } else if v < -h && arm != Arm::Low {
            if arm == Arm::High {
                downs += 1;
            }
            arm = Arm::Low;
        }
    }
    let cycles = ups.len().min(downs.max(ups.len().saturating_sub(1)));
    let period = if ups.len() >= 2 {
        let total: usize = ups.windows(2).map(|w| w[1] - w[0]).sum();
        let crossing_est = total as f64 / (ups.len() - 1) as f64;
        // Refine with the autocorrelation peak when the signal is long
        // enough; crossing spacing alone quantizes to whole ticks.
        Some(refine_period(&centered, crossing_est).unwrap_or(crossing_est))
    } else {
        None
    };
    RhythmReport { cycles, period }
}

/// Parabolic interpolation of the autocorrelation peak near a period guess.
fn refine_period(centered: &[f64], guess: f64) -> Option<f64> {
    let n = centered.len();
    let lag0 = guess.round() as usize;
    if lag0 < 3 || lag0 + 2 >= n {
        return None;
    }
    let rho = |lag: usize| -> f64 {
        let mut acc = 0.0;
        for i in lag..n {
            acc += centered[i] * centered[i - lag];
        }
        acc
    };
    // Local search around the guess, then a parabolic fit over the peak.
    let lo = lag0.saturating_sub(2).max(2);
    let hi = (lag0 + 2).min(n - 2);
    let mut best = lo;
    let mut best_v = f64::NEG_INFINITY;
    for lag in lo..=hi {
        let v = rho(lag);
        if v > best_v {
            best_v = v;
            best = lag;
        }
    }
    if best < 2 || best + 1 >= n {
        return None;
    }
    let (ym, y0, yp) = (rho(best - 1), rho(best), rho(best + 1));
    let denom = ym - 2.0 * y0 + yp;
    if denom.abs() < 1e-12 {
        return Some(best as f64);
    }
    let shift = 0.5 * (ym - yp) / denom;
    Some(best as f64 + shift.clamp(-1.0, 1.0))
}

/// Lag of the first off-zero autocorrelation peak.
pub fn autocorrelation_peak_lag(signal: &[f64], min_lag: usize, max_lag: usize) -> Option<usize> {
    if signal.len() < max_lag + 2 {
        return None;
    }
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let centered: Vec<f64> = signal.iter().map(|v| v - mean).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return None;
    }
    let mut best = (min_lag, f64::NEG_INFINITY);
    for lag in min_lag..=max_lag {
        let mut acc = 0.0;
        for i in lag..centered.len() {
            acc += centered[i] * centered[i - lag];
        }
        let rho = acc / denom;
        if rho > best.1 {
            best = (lag, rho);
        }
    }
    Some(best.0)
}
