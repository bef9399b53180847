//! Closed-loop rollouts and task scoring.
//!
//! One runner drives plant, history, intent schedule, delay line, tremor,
//! and the reflex override for a whole episode, recording everything the
//! figure-level experiments need. The decoder keeps computing even while a
//! reflex override is active, so membrane state and activity traces stay
//! aligned with the applied command stream.

use crate::action::ActionCommand;
use crate::cerebellar::{reflex_scan, ReflexConfig, StateHistory};
use crate::cortical::DelayLine;
use crate::plant::{
    detect_cycles, expert_action, smoothness_metrics, Obstacle, Plant, PlantConfig, RhythmReport,
    Smoothness, TaskKind, TaskSpec, Tremor,
};
use crate::spinal::ActivityTrace;
use crate::stack::ControlStack;
use crate::tensor::Tensor;
use crate::trainer::{intent_schedule_for, TrainResult, TrainerError};
use serde::{Deserialize, Serialize};

type T64 = Tensor<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Trained,
    Expert,
    /// Decode the (delayed) latent's command row directly into deltas.
    /// Used by latency protocols where learned quality is not under test.
    LatentDecode { gain: f64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessTolerances {
    /// Final distance to target for reach success (m-equivalent).
    pub reach: f64,
    /// Max pose drift for hold success.
    pub hold: f64,
    /// Mean gripper tracking error.
    pub gripper: f64,
    /// Cue response must exceed this fraction of the commanded magnitude.
    pub response_floor: f64,
    /// Allowed deviation of the detected period, in ticks.
    pub period: f64,
}

impl Default for SuccessTolerances {
    fn default() -> Self {
        SuccessTolerances {
            reach: 0.03,
            hold: 0.01,
            gripper: 0.15,
            response_floor: 0.1,
            period: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub plant: PlantConfig,
    pub cortical_delay: usize,
    pub tremor_sigma: f64,
    /// Freeze the emitted latent from this tick on (occlusion analogue).
    pub freeze_at: Option<usize>,
    pub reflex: Option<ReflexConfig>,
    pub obstacles: Vec<Obstacle>,
    /// Clamp applied actions to zero before this tick (cue protocols).
    pub hold_zero_until: Option<usize>,
    pub seed: u64,
    pub tolerances: SuccessTolerances,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            plant: PlantConfig::default(),
            cortical_delay: 0,
            tremor_sigma: 0.0,
            freeze_at: None,
            reflex: None,
            obstacles: Vec::new(),
            hold_zero_until: None,
            seed: 0,
            tolerances: SuccessTolerances::default(),
        }
    }
}

/// Everything recorded while rolling one episode.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub task: TaskSpec,
    pub actions: Vec<ActionCommand>,
    pub poses: Vec<[f64; 6]>,
    pub grippers: Vec<f64>,
    pub wrenches: Vec<[f64; 6]>,
    pub labels: Vec<String>,
    pub trace: ActivityTrace,
    pub first_contact: Option<usize>,
    pub first_reflex: Option<usize>,
}

pub fn rollout(
    stack: &mut ControlStack,
    task: &TaskSpec,
    mode: PolicyMode,
    opts: &EvalOptions,
) -> TrainResult<Rollout> {
    let cfg = stack.cfg;
    let schedule = intent_schedule_for(task, cfg.tokens, cfg.channels);
    let mut plant = Plant::new(opts.plant, task.start, opts.obstacles.clone(), opts.seed);
    let mut hist = StateHistory::new(cfg.history, (4 * cfg.history).max(64));
    let first_obs = plant.state.to_state_vector();
    for _ in 0..cfg.history {
        hist.push_state(first_obs.clone());
    }
    let mut delay = DelayLine::new(opts.cortical_delay);
    let mut tremor = Tremor::new(opts.tremor_sigma, opts.seed ^ 0x7e0a);
    let reflex_enabled = !matches!(mode, PolicyMode::Expert)
        && opts.reflex.is_some()
        && !cfg.no_cerebellum;

    stack.reset_episode();
    let mut out = Rollout {
        task: task.clone(),
        actions: Vec::with_capacity(task.ticks),
        poses: Vec::with_capacity(task.ticks),
        grippers: Vec::with_capacity(task.ticks),
        wrenches: Vec::with_capacity(task.ticks),
        labels: Vec::with_capacity(task.ticks),
        trace: ActivityTrace::new(),
        first_contact: None,
        first_reflex: None,
    };
    let mut frozen: Option<T64> = None;
    let mut reflex_hold = 0usize;
    let mut reflex_cmd = ActionCommand::zero();

    for t in 0..task.ticks {
        let z = match (&frozen, opts.freeze_at) {
            (Some(z), _) => z.clone(),
            (None, at) => {
                let obs = crate::cortical::IntentObs {
                    pose: plant.state.pose,
                    force: [
                        plant.state.wrench[0],
                        plant.state.wrench[1],
                        plant.state.wrench[2],
                    ],
                };
                let raw = schedule
                    .intent(t, Some(&obs))
                    .map_err(|e| TrainerError::Numerical(e.to_string()))?;
                let noisy = tremor.perturb_latent(&raw);
                if at == Some(t) {
                    frozen = Some(noisy.clone());
                }
                noisy
            }
        };
        let z_delayed = delay.push(z);

        let mut action = match mode {
            PolicyMode::Trained => {
                let (a, activity) = stack.act(&z_delayed, &hist)?;
                out.trace.push(activity);
                a
            }
            PolicyMode::Expert => expert_action(task, &plant.state),
            PolicyMode::LatentDecode { gain } => {
                let mut deltas = [0.0; 6];
                for (c, d) in deltas.iter_mut().enumerate() {
                    *d = gain * z_delayed.at2(0, c);
                }
                ActionCommand {
                    deltas,
                    gripper: z_delayed.at2(0, 6).clamp(0.0, 1.0),
                }
            }
        };

        if reflex_enabled {
            if reflex_hold > 0 {
                action = reflex_cmd;
                reflex_hold -= 1;
            } else if let Some(r) = reflex_scan(
                &hist,
                opts.reflex.as_ref().unwrap(),
                opts.plant.wrench_rate_mult,
            ) {
                action = r.command;
                reflex_cmd = r.command;
                reflex_hold = r.hold_ticks.saturating_sub(1);
                if out.first_reflex.is_none() {
                    out.first_reflex = Some(t);
                }
            }
        }
        // The hold protocol gates what reaches the plant; the commanded
        // stream stays recorded as issued.
        let mut applied = action;
        if let Some(until) = opts.hold_zero_until {
            if t < until {
                applied = ActionCommand::zero();
            }
        }

        plant.step(&applied);
        let st = &plant.state;
        if out.first_contact.is_none() && st.wrench.iter().any(|&w| w != 0.0) {
            out.first_contact = Some(t);
        }
        out.actions.push(action);
        out.poses.push(st.pose);
        out.grippers.push(st.gripper);
        out.wrenches.push(st.wrench);
        out.labels.push(task.phase_label(t).to_string());
        hist.push_state(st.to_state_vector());
        for w in plant.wrench_subsamples() {
            hist.push_wrench(*w);
        }
    }
    Ok(out)
}

// ── Scoring ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: String,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_drift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rhythm: Option<RhythmReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gripper_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<Smoothness>,
}

fn pose_distance(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Score one rollout against its task's success criterion.
pub fn judge(rollout: &Rollout, tol: &SuccessTolerances) -> TaskEval {
    let task = &rollout.task;
    let smoothness = smoothness_metrics(&rollout.actions).ok();
    let mut eval = TaskEval {
        task: task_name(task),
        success: false,
        final_distance: None,
        max_drift: None,
        rhythm: None,
        gripper_error: None,
        response_mean: None,
        smoothness,
    };
    match &task.kind {
        TaskKind::Reach { target, .. } => {
            let last = rollout.poses.last().expect("non-empty rollout");
            let d = pose_distance(last, target);
            eval.final_distance = Some(d);
            eval.success = d < tol.reach;
        }
        TaskKind::StaticHold => {
            let drift = rollout
                .poses
                .iter()
                .map(|p| pose_distance(p, &task.start))
                .fold(0.0f64, f64::max);
            eval.max_drift = Some(drift);
            eval.success = drift < tol.hold;
        }
        TaskKind::Shake {
            axis,
            period_ticks,
            cycles,
            ..
        } => {
            let deltas: Vec<f64> = rollout.actions.iter().map(|a| a.deltas[*axis]).collect();
            let report = detect_cycles(&deltas);
            let period_ok = report
                .period
                .map(|p| (p - *period_ticks as f64).abs() <= tol.period)
                .unwrap_or(false);
            eval.success = report.cycles == *cycles && period_ok;
            eval.rhythm = Some(report);
        }
        TaskKind::StaticPoseDynamicGripper { period, low, high } => {
            // Replay the expert's gripper trajectory through the same rate
            // limit and compare apertures.
            let mut expert_aperture = 0.0f64;
            let rate = 0.2;
            let mut err = 0.0;
            for (t, g) in rollout.grippers.iter().enumerate() {
                let target = if (t / period) % 2 == 0 { *high } else { *low };
                let step = (target - expert_aperture).clamp(-rate, rate);
                expert_aperture = (expert_aperture + step).clamp(0.0, 1.0);
                err += (g - expert_aperture).abs();
            }
            let mean_err = err / rollout.grippers.len() as f64;
            let drift = rollout
                .poses
                .iter()
                .map(|p| pose_distance(p, &task.start))
                .fold(0.0f64, f64::max);
            eval.gripper_error = Some(mean_err);
            eval.max_drift = Some(drift);
            eval.success = mean_err < tol.gripper && drift < tol.hold;
        }
        TaskKind::CollisionCourse { .. } => {
            eval.success = rollout.first_contact.is_some();
        }
        TaskKind::DelayedCue {
            respond_from,
            axis,
            sign,
            magnitude,
            ..
        } => {
            let responses: Vec<f64> = rollout.actions[*respond_from..]
                .iter()
                .map(|a| a.deltas[*axis])
                .collect();
            let mean = responses.iter().sum::<f64>() / responses.len().max(1) as f64;
            eval.response_mean = Some(mean);
            eval.success =
                mean.signum() == sign.signum() && mean.abs() >= tol.response_floor * magnitude;
        }
    }
    eval
}

fn task_name(task: &TaskSpec) -> String {
    match &task.kind {
        TaskKind::Reach { .. } => "reach".into(),
        TaskKind::StaticHold => "static_hold".into(),
        TaskKind::Shake { .. } => "shake".into(),
        TaskKind::StaticPoseDynamicGripper { .. } => "static_pose_dynamic_gripper".into(),
        TaskKind::CollisionCourse { .. } => "collision_course".into(),
        TaskKind::DelayedCue { .. } => "delayed_cue".into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub evals: Vec<TaskEval>,
    pub success_rate: f64,
}

/// Closed-loop rollouts over a task list; per-task seeds derive from the
/// base seed in list order.
pub fn evaluate(
    stack: &mut ControlStack,
    tasks: &[TaskSpec],
    mode: PolicyMode,
    opts: &EvalOptions,
) -> TrainResult<EvalReport> {
    let mut evals = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let mut o = opts.clone();
        o.seed = opts.seed.wrapping_add(i as u64);
        let r = rollout(stack, task, mode, &o)?;
        evals.push(judge(&r, &opts.tolerances));
    }
    let success_rate =
        evals.iter().filter(|e| e.success).count() as f64 / evals.len().max(1) as f64;
    Ok(EvalReport {
        evals,
        success_rate,
    })
}
