//! Behavior-cloning pipeline: synthetic demonstration generation, hybrid
//! loss (action cloning plus next-state prediction), adaptive-moment
//! optimization with surrogate gradients, and the full-stack gradient check.
//!
//! Training is teacher-forced: the history windows and injected latents come
//! from the recorded demo, while decoder membrane state flows through time
//! on the tape within each truncated-backprop segment and is carried as
//! values across segment boundaries.

use crate::action::ACTION_DIMS;
use crate::cerebellar::{StateHistory, StateVector};
use crate::cortical::{latent, IntentPhase, IntentSchedule, LatentGen};
use crate::plant::{expert_action, Plant, PlantConfig, TaskKind, TaskSpec, Tremor};
use crate::rng::Rng;
use crate::stack::{ControlStack, StackConfig};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

type T64 = Tensor<f64>;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type TrainResult<T> = Result<T, TrainerError>;

impl From<crate::autodiff::AutodiffError> for TrainerError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainerError::Numerical(e.to_string())
    }
}

// ── Demonstrations ──────────────────────────────────────────────────

/// One aligned sample: injected latent, observation, expert command.
#[derive(Debug, Clone)]
pub struct DemoStep {
    pub z_sem: T64,
    pub state: StateVector,
    pub expert: crate::action::ActionCommand,
}

#[derive(Debug, Clone)]
pub struct Demo {
    pub task: TaskSpec,
    pub steps: Vec<DemoStep>,
}

/// Corruptions applied to the intent stream while recording demos, so the
/// policy learns to anchor execution in proprioception instead of trusting
/// the latent verbatim.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DemoOptions {
    /// Gaussian jitter on the latent per tick per channel.
    pub tremor_sigma: f64,
    /// Probability an episode freezes its latent mid-run (occlusion analogue).
    pub freeze_prob: f64,
    /// Fractional episode window in which the freeze tick is drawn.
    pub freeze_window: (f64, f64),
    /// Gaussian jitter applied to the action driving the plant while the
    /// clean expert command is recorded as the label; spreads the
    /// demonstrations over a tube around the nominal trajectory so the
    /// expert's corrections are part of the corpus.
    pub action_noise_sigma: f64,
    /// Record expert commands without executing them: the plant stays put
    /// for the whole episode. Isometric protocols (cue tasks) use this so
    /// proprioception cannot reveal the commanded response.
    pub hold_plant: bool,
    pub plant: PlantConfig,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            tremor_sigma: 0.0,
            freeze_prob: 0.0,
            freeze_window: (0.4, 0.7),
            action_noise_sigma: 0.0,
            hold_plant: false,
            plant: PlantConfig::default(),
        }
    }
}

/// Scripted intent schedule for a task, at the stack's latent geometry.
pub fn intent_schedule_for(task: &TaskSpec, tokens: usize, channels: usize) -> IntentSchedule {
    assert!(channels >= latent::MIN_CHANNELS, "latent too narrow");
    let phases = match &task.kind {
        TaskKind::StaticHold => vec![IntentPhase {
            start: 0,
            end: task.ticks,
            gen: LatentGen::Zero,
        }],
        TaskKind::Reach { target, .. } => vec![IntentPhase {
            start: 0,
            end: task.ticks,
            gen: LatentGen::ReachTo {
                target: *target,
                sat: 0.2,
            },
        }],
        TaskKind::Shake {
            axis,
            period_ticks,
            cycles,
            ..
        } => {
            let active = period_ticks * cycles;
            vec![
                IntentPhase {
                    start: 0,
                    end: active,
                    gen: LatentGen::ShakePhase {
                        axis: *axis,
                        magnitude: 1.0,
                        half_period: period_ticks / 2,
                    },
                },
                IntentPhase {
                    start: active,
                    end: task.ticks.max(active + 1),
                    gen: LatentGen::Zero,
                },
            ]
        }
        TaskKind::StaticPoseDynamicGripper { period, low, high } => vec![IntentPhase {
            start: 0,
            end: task.ticks,
            gen: LatentGen::GripperWave {
                period: *period,
                low: *low,
                high: *high,
            },
        }],
        TaskKind::CollisionCourse { direction, .. } => {
            let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
            let approach = [
                direction[0] / norm,
                direction[1] / norm,
                direction[2] / norm,
            ];
            vec![IntentPhase {
                start: 0,
                end: task.ticks,
                gen: LatentGen::ApproachRetract {
                    approach,
                    force_threshold: 5.0,
                },
            }]
        }
        TaskKind::DelayedCue {
            cue_ticks, sign, ..
        } => vec![
            IntentPhase {
                start: 0,
                end: *cue_ticks,
                gen: LatentGen::Cue { sign: *sign },
            },
            IntentPhase {
                start: *cue_ticks,
                end: task.ticks,
                gen: LatentGen::Zero,
            },
        ],
    };
    IntentSchedule {
        tokens,
        channels,
        phases,
    }
}

/// Roll the expert through the plant, recording aligned
/// (latent, observation, expert command) tuples. Deterministic per seed.
pub fn generate_demos(
    tasks: &[TaskSpec],
    n: usize,
    seed: u64,
    tokens: usize,
    channels: usize,
    opts: &DemoOptions,
) -> TrainResult<Vec<Demo>> {
    if tasks.is_empty() || n == 0 {
        return Err(TrainerError::EmptyCorpus);
    }
    let mut root = Rng::seed_from(seed);
    let mut demos = Vec::with_capacity(n);
    for i in 0..n {
        let task = tasks[i % tasks.len()].clone();
        let mut rng = root.split(i as u64);
        let schedule = intent_schedule_for(&task, tokens, channels);
        let mut tremor = Tremor::new(opts.tremor_sigma, rng.next_u64());
        let freeze_at = if rng.chance(opts.freeze_prob) {
            let (lo, hi) = opts.freeze_window;
            Some((task.ticks as f64 * rng.uniform_in(lo, hi)) as usize)
        } else {
            None
        };
        let mut plant = Plant::new(opts.plant, task.start, vec![], rng.next_u64());
        let mut drive_noise = Tremor::new(opts.action_noise_sigma, rng.next_u64());
        let mut steps = Vec::with_capacity(task.ticks);
        let mut frozen: Option<T64> = None;
        for t in 0..task.ticks {
            let obs = plant.state.clone();
            let intent_obs = crate::cortical::IntentObs {
                pose: obs.pose,
                force: [obs.wrench[0], obs.wrench[1], obs.wrench[2]],
            };
            let z_raw = schedule
                .intent(t, Some(&intent_obs))
                .map_err(|e| TrainerError::Numerical(e.to_string()))?;
            let z = match (&frozen, freeze_at) {
                (Some(z), _) => z.clone(),
                (None, Some(f)) if t >= f => {
                    let z = tremor.perturb_latent(&z_raw);
                    frozen = Some(z.clone());
                    z
                }
                _ => tremor.perturb_latent(&z_raw),
            };
            let expert = expert_action(&task, &obs);
            steps.push(DemoStep {
                z_sem: z,
                state: obs.to_state_vector(),
                expert,
            });
            let applied = if opts.hold_plant {
                crate::action::ActionCommand::zero()
            } else {
                drive_noise.perturb_action(&expert)
            };
            plant.step(&applied);
        }
        demos.push(Demo { task, steps });
    }
    Ok(demos)
}

// ── Optimizer ───────────────────────────────────────────────────────

/// Adaptive moment estimation with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<T64>,
    v: Vec<T64>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|s| T64::zeros(s)).collect(),
            v: shapes.iter().map(|s| T64::zeros(s)).collect(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update_one(&mut self, idx: usize, param: &mut T64, grad: &T64) {
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        for i in 0..param.len() {
            let g = grad.at(i);
            let mi = b1 * m.at(i) + (1.0 - b1) * g;
            let vi = b2 * v.at(i) + (1.0 - b2) * g * g;
            m.set(i, mi);
            v.set(i, vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            param.set(i, param.at(i) - self.lr * m_hat / (v_hat.sqrt() + self.eps));
        }
    }
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay; 1.0 keeps it constant.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Segments accumulated per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub bc_weight: f64,
    pub fm_weight: f64,
    /// Truncated backprop-through-time horizon in control ticks.
    pub tbptt: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 40,
            batch: 1,
            seed: 0,
            bc_weight: 1.0,
            fm_weight: 0.1,
            tbptt: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
}

/// Minimize mean squared action error (plus weighted next-state prediction
/// error when refinement is enabled) over the demo corpus, in place.
pub fn train(
    stack: &mut ControlStack,
    demos: &[Demo],
    cfg: &TrainConfig,
) -> TrainResult<TrainReport> {
    if demos.is_empty() {
        return Err(TrainerError::EmptyCorpus);
    }
    let scfg = stack.cfg;
    let fm_enabled = scfg.refine_cycles > 1 && !scfg.no_cerebellum && cfg.fm_weight > 0.0;
    let state_dim = scfg.state_dim();

    let mut shapes = Vec::new();
    stack.visit_params(&mut |_, t| shapes.push(t.shape().to_vec()));
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, &shapes);
    let mut grad_accum: Vec<T64> = shapes.iter().map(|s| T64::zeros(s)).collect();
    let mut accum_count = 0usize;

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let mut epoch_loss = 0.0;
        let mut segments = 0usize;
        for demo in demos {
            // Episode start: quiescent decoder, history padded with the
            // first observation (same convention as the closed-loop runner).
            let mut carried: Option<(Vec<crate::lif::MembraneState<f64>>, T64)> = None;
            let mut hist = StateHistory::new(scfg.history, 4 * scfg.history.max(16));
            for _ in 0..scfg.history {
                hist.push_state(demo.steps[0].state.clone());
            }

            let mut global_t = 0usize;
            for segment in demo.steps.chunks(cfg.tbptt) {
                let mut tape = crate::autodiff::Tape::new();
                let ids = stack.register(&mut tape)?;
                let mut spinal_state = match &carried {
                    None => stack.spinal.zero_state_ids(&mut tape)?,
                    Some((membranes, u_out)) => {
                        let mut mids = Vec::new();
                        for st in membranes {
                            let u = tape.leaf(st.u.clone())?;
                            let s = tape.leaf(st.s_prev.clone())?;
                            mids.push((u, s));
                        }
                        crate::spinal::SpinalStateIds {
                            membranes: mids,
                            u_out: tape.leaf(u_out.clone())?,
                        }
                    }
                };

                let mut bc_sum: Option<crate::autodiff::NodeId> = None;
                let mut fm_sum: Option<crate::autodiff::NodeId> = None;
                let mut n_fm = 0usize;
                for (i, step) in segment.iter().enumerate() {
                    if global_t > 0 {
                        hist.push_state(step.state.clone());
                    }
                    let window: Vec<crate::autodiff::NodeId> = hist
                        .scaled_sequence(&scfg.state_scale)
                        .into_iter()
                        .map(|x| tape.leaf(x))
                        .collect::<Result<_, _>>()?;
                    let z = tape.leaf(step.z_sem.clone())?;
                    let (action, predictions, next_state) =
                        stack.tick_on_tape(&mut tape, &ids, z, &window, spinal_state, false)?;
                    spinal_state = next_state;

                    let expert = tape.leaf(T64::from_vec(
                        &[ACTION_DIMS],
                        step.expert.to_vec(),
                    )?)?;
                    let err = tape.sub(action, expert)?;
                    let sq = tape.mul(err, err)?;
                    let term = tape.sum(sq)?;
                    bc_sum = Some(match bc_sum {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });

                    if fm_enabled {
                        if let (Some(&pred), Some(next)) =
                            (predictions.first(), segment.get(i + 1))
                        {
                            let target = tape
                                .leaf(next.state.to_scaled_tensor(&scfg.state_scale))?;
                            let ferr = tape.sub(pred, target)?;
                            let fsq = tape.mul(ferr, ferr)?;
                            let fterm = tape.sum(fsq)?;
                            fm_sum = Some(match fm_sum {
                                None => fterm,
                                Some(acc) => tape.add(acc, fterm)?,
                            });
                            n_fm += 1;
                        }
                    }
                    global_t += 1;
                }

                let bc_norm = cfg.bc_weight / (segment.len() * ACTION_DIMS) as f64;
                let mut loss = tape.scale(bc_sum.expect("segment non-empty"), bc_norm)?;
                if let Some(fm) = fm_sum {
                    let fm_norm = cfg.fm_weight / (n_fm * state_dim) as f64;
                    let fm_scaled = tape.scale(fm, fm_norm)?;
                    loss = tape.add(loss, fm_scaled)?;
                }
                let loss_value = tape.value(loss).at(0);
                if !loss_value.is_finite() {
                    return Err(TrainerError::Numerical(format!(
                        "loss became non-finite at epoch {} (segment loss {loss_value})",
                        loss_curve.len()
                    )));
                }
                tape.backward(loss)?;

                for (idx, &pid) in ids.all.iter().enumerate() {
                    let g = tape.grad(pid);
                    if !g.all_finite() {
                        return Err(TrainerError::Numerical(
                            "gradient became non-finite".into(),
                        ));
                    }
                    let acc = &mut grad_accum[idx];
                    for k in 0..acc.len() {
                        acc.set(k, acc.at(k) + g.at(k));
                    }
                }
                accum_count += 1;
                if accum_count >= cfg.batch {
                    let inv = 1.0 / accum_count as f64;
                    adam.begin_step();
                    let mut idx = 0;
                    stack.visit_params_mut(&mut |_, p| {
                        let g = grad_accum[idx].scale(inv);
                        adam.update_one(idx, p, &g);
                        idx += 1;
                    });
                    for g in &mut grad_accum {
                        *g = T64::zeros(g.shape());
                    }
                    accum_count = 0;
                }

                // Carry decoder state values across the segment boundary.
                let mut membranes = Vec::with_capacity(scfg.spinal.blocks);
                for &(u, s) in &spinal_state.membranes {
                    membranes.push(crate::lif::MembraneState {
                        u: tape.value(u).clone(),
                        s_prev: tape.value(s).clone(),
                    });
                }
                carried = Some((membranes, tape.value(spinal_state.u_out).clone()));

                epoch_loss += loss_value;
                segments += 1;
            }
        }
        loss_curve.push(epoch_loss / segments as f64);
    }
    let final_loss = *loss_curve.last().unwrap_or(&f64::NAN);
    Ok(TrainReport {
        loss_curve,
        final_loss,
    })
}

// Closed-loop evaluation lives in `runner`; re-exported here since it is
// part of this pipeline's surface.
pub use crate::runner::{evaluate, judge, rollout, EvalOptions, EvalReport, PolicyMode};

// ── Full-stack gradient check ───────────────────────────────────────

/// Analytic gradients of a full-stack graph (query bottleneck → modulation
/// → spiking decoder with the smooth reference forward) against central
/// finite differences. Returns the worst relative error over the probes.
pub fn full_stack_gradient_check(seed: u64, probes_per_module: usize) -> TrainResult<f64> {
    use crate::cortical::{synth_scene, QFormer, QFormerConfig, SceneConfig};

    let mut rng = Rng::seed_from(seed);
    let mut cfg = StackConfig {
        joints: 6,
        history: 3,
        gru_hidden: 6,
        tokens: 2,
        channels: latent::MIN_CHANNELS,
        refine_cycles: 2,
        ..StackConfig::default()
    };
    cfg.spinal.input_dim = cfg.latent_len();
    cfg.spinal.n_hidden = 8;
    cfg.spinal.blocks = 2;
    let stack = ControlStack::init(cfg, &mut rng);

    let scene_cfg = SceneConfig::default();
    let qf = QFormer::init(
        QFormerConfig {
            queries: cfg.tokens,
            d_model: cfg.channels,
            d_feat: scene_cfg.d_feat,
            layer_range: (1, 2),
        },
        &mut rng,
    );
    let scene = synth_scene(&scene_cfg, &mut rng);
    let tokens = qf
        .gather_tokens(&scene.stack)
        .map_err(|e| TrainerError::Numerical(e.to_string()))?;

    // Fixed random window, probe directions, and expert target.
    let window_vals: Vec<T64> = (0..cfg.history)
        .map(|_| T64::from_fn(&[cfg.state_dim()], |_| rng.normal_scaled(0.3)))
        .collect();
    let probe_a = T64::from_fn(&[ACTION_DIMS], |_| rng.normal());
    let probe_p = T64::from_fn(&[cfg.state_dim()], |_| rng.normal());

    // Scalar loss of the whole smooth-forward stack for given weights,
    // returning the built graph so analytic gradients can be pulled out.
    type Graph = (
        crate::autodiff::Tape<f64>,
        Vec<crate::autodiff::NodeId>,
        Vec<crate::autodiff::NodeId>,
        crate::autodiff::NodeId,
    );
    let eval = |stack: &ControlStack, qf: &QFormer| -> TrainResult<(f64, Option<Graph>)> {
        let mut tape = crate::autodiff::Tape::new();
        let mut qf_params = Vec::new();
        let qf_ids = qf
            .register(&mut tape, &mut qf_params)
            .map_err(|e| TrainerError::Numerical(e.to_string()))?;
        let tok = tape.leaf(tokens.clone())?;
        let (z_sem, _attn) = qf
            .distill_on_tape(&mut tape, &qf_ids, tok)
            .map_err(|e| TrainerError::Numerical(e.to_string()))?;
        let ids = stack.register(&mut tape)?;
        let window: Vec<crate::autodiff::NodeId> = window_vals
            .iter()
            .map(|x| tape.leaf(x.clone()))
            .collect::<Result<_, _>>()?;
        let state0 = stack.spinal.zero_state_ids(&mut tape)?;
        let (a1, preds, st1) = stack.tick_on_tape(&mut tape, &ids, z_sem, &window, state0, true)?;
        let (a2, _, _) = stack.tick_on_tape(&mut tape, &ids, z_sem, &window, st1, true)?;

        let pa = tape.leaf(probe_a.clone())?;
        let w1 = tape.mul(a1, pa)?;
        let w2 = tape.mul(a2, pa)?;
        let s1 = tape.sum(w1)?;
        let s2 = tape.sum(w2)?;
        let mut loss = tape.add(s1, s2)?;
        if let Some(&pred) = preds.first() {
            let pp = tape.leaf(probe_p.clone())?;
            let wp = tape.mul(pred, pp)?;
            let sp = tape.sum(wp)?;
            loss = tape.add(loss, sp)?;
        }
        let value = tape.value(loss).at(0);
        Ok((value, Some((tape, ids.all, qf_params, loss))))
    };

    let (_, full) = eval(&stack, &qf)?;
    let (mut tape, stack_param_ids, qf_param_ids, loss) = full.expect("graph built");
    tape.backward(loss)?;

    // Module boundaries inside the stack's flat parameter list.
    let mut module_of: Vec<&'static str> = Vec::new();
    stack.visit_params(&mut |name, _| {
        let m = if name.starts_with("gru.") {
            "gru"
        } else if name.starts_with("film.") {
            "film"
        } else if name.starts_with("fwd.") {
            "fwd"
        } else {
            "spinal"
        };
        module_of.push(m);
    });

    let mut worst: f64 = 0.0;
    let mut probe_rng = Rng::seed_from(seed ^ 0x5eed);
    let modules = ["qformer", "gru", "film", "fwd", "spinal"];
    for module in modules {
        let candidates: Vec<(bool, usize)> = if module == "qformer" {
            (0..qf_param_ids.len()).map(|i| (true, i)).collect()
        } else {
            module_of
                .iter()
                .enumerate()
                .filter(|(_, m)| **m == module)
                .map(|(i, _)| (false, i))
                .collect()
        };
        for _ in 0..probes_per_module {
            let (is_qf, pidx) = candidates[probe_rng.index(candidates.len())];
            let node = if is_qf {
                qf_param_ids[pidx]
            } else {
                stack_param_ids[pidx]
            };
            let n_elems = tape.value(node).len();
            let coord = probe_rng.index(n_elems);
            let analytic = tape.grad(node).at(coord);

            let h = 1e-5;
            let eval_shifted = |delta: f64| -> TrainResult<f64> {
                let mut s2 = stack.clone();
                let mut q2 = qf.clone();
                if is_qf {
                    let mut idx = 0;
                    q2.visit_params_mut(&mut |_, t| {
                        if idx == pidx {
                            t.set(coord, t.at(coord) + delta);
                        }
                        idx += 1;
                    });
                } else {
                    let mut idx = 0;
                    s2.visit_params_mut(&mut |_, t| {
                        if idx == pidx {
                            t.set(coord, t.at(coord) + delta);
                        }
                        idx += 1;
                    });
                }
                Ok(eval(&s2, &q2)?.0)
            };
            let fd = (eval_shifted(h)? - eval_shifted(-h)?) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-8 {
                continue; // both zero to numerical precision
            }
            let rel = (analytic - fd).abs() / denom.max(1.0e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
