//! Spiking decoder tier: residual blocks of `x ← x + LIF(Linear(x))` driven
//! for a window of timesteps per control step, with non-resetting output
//! integrators turning spike activity into a continuous command.
//!
//! Hidden membranes persist across control steps (that is the temporal
//! memory under test); the output integrator accumulates within the window
//! and is renormalized by 1/T at readout. Every forward pass records layer
//! activity so sparsity and somatotopy can be measured after the fact.

use crate::action::{ActionCommand, ACTION_DIMS};
use crate::autodiff::{NodeId, Tape};
use crate::lif::{lif_step, reset_state, LifConfig, MembraneState, ResetMode};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError, TensorResult};
use serde::{Deserialize, Serialize};

type T64 = Tensor<f64>;
type Tape64 = Tape<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Integrator value at the final timestep, scaled by 1/T.
    #[default]
    Last,
    /// Mean integrator value over the window, scaled so a constant drive
    /// reads the same as `Last`.
    Mean,
}

/// What the output integrators accumulate each timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutSource {
    /// The full residual stream, analog injection included.
    #[default]
    Stream,
    /// Synaptic spike events only: the decoder can only move the motor
    /// command by spiking, which is what makes recruitment measurable.
    Spikes,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpinalConfig {
    /// Flattened latent width feeding the input projection.
    pub input_dim: usize,
    pub n_hidden: usize,
    pub blocks: usize,
    pub n_out: usize,
    pub lif: LifConfig<f64>,
    /// Output integrator decay; 1.0 is a pure accumulator.
    pub out_beta: f64,
    /// Zero the integrator at control-step boundaries (with `out_beta` at
    /// 1.0 the integral would otherwise grow without bound).
    pub out_reset_per_step: bool,
    pub readout: Readout,
    pub readout_source: ReadoutSource,
}

impl Default for SpinalConfig {
    fn default() -> Self {
        SpinalConfig {
            input_dim: 256,
            n_hidden: 128,
            blocks: 2,
            n_out: ACTION_DIMS,
            lif: LifConfig::default(),
            out_beta: 1.0,
            out_reset_per_step: true,
            readout: Readout::Last,
            readout_source: ReadoutSource::Stream,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpinalBlock {
    pub w: T64,
    pub b: T64,
}

/// Stateful spiking decoder. Single-owner mutable: membrane state lives here.
#[derive(Debug, Clone)]
pub struct SpinalNet {
    pub cfg: SpinalConfig,
    pub w_in: T64,
    pub b_in: T64,
    pub blocks: Vec<SpinalBlock>,
    pub w_out: T64,
    /// Reset hidden membranes at every control step (temporal ablation).
    pub single_step: bool,
    /// (block, neuron) membrane probes recorded per timestep.
    pub probe_neurons: Vec<(usize, usize)>,
    states: Vec<MembraneState<f64>>,
    u_out: T64,
}

pub struct SpinalParamIds {
    pub w_in: NodeId,
    pub b_in: NodeId,
    pub blocks: Vec<(NodeId, NodeId)>,
    pub w_out: NodeId,
}

/// Tape handles for the carried state of one net between control steps.
pub struct SpinalStateIds {
    pub membranes: Vec<(NodeId, NodeId)>,
    pub u_out: NodeId,
}

/// Activity recorded for one control step.
#[derive(Debug, Clone)]
pub struct StepActivity {
    /// Mean firing rate per block over the window.
    pub block_rates: Vec<f64>,
    /// Per-neuron window rates, `[blocks, n_hidden]`.
    pub neuron_rates: T64,
    /// Per-neuron "fired at least once this window" masks per block.
    pub any_spike: Vec<Vec<bool>>,
    /// |proj| per channel (constant within the window).
    pub proj_abs: Vec<f64>,
    /// Probe membrane traces, one inner vec per probe, one value per τ.
    pub probes: Vec<Vec<f64>>,
}

/// Per-layer activity across a rollout.
#[derive(Debug, Clone, Default)]
pub struct ActivityTrace {
    pub steps: Vec<StepActivity>,
}

impl ActivityTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: StepActivity) {
        self.steps.push(step);
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.steps.first().map_or(0, |s| s.block_rates.len())
    }

    /// `[steps, blocks]` mean firing rate matrix.
    pub fn per_layer_rates(&self) -> T64 {
        let (n, b) = (self.n_steps(), self.n_blocks());
        let mut out = T64::zeros(&[n, b]);
        for (i, s) in self.steps.iter().enumerate() {
            for (j, &r) in s.block_rates.iter().enumerate() {
                out.set2(i, j, r);
            }
        }
        out
    }

    /// `[blocks, n_hidden]` per-neuron rate averaged over all steps.
    pub fn per_neuron_mean(&self) -> T64 {
        let b = self.n_blocks();
        let n_hidden = self.steps.first().map_or(0, |s| s.neuron_rates.cols());
        let mut out = T64::zeros(&[b, n_hidden]);
        if self.steps.is_empty() {
            return out;
        }
        for s in &self.steps {
            for l in 0..b {
                for j in 0..n_hidden {
                    out.set2(l, j, out.at2(l, j) + s.neuron_rates.at2(l, j));
                }
            }
        }
        let inv = 1.0 / self.steps.len() as f64;
        out.map(|v| v * inv)
    }

    /// Mean hidden firing rate over a subset of steps (all blocks pooled).
    pub fn mean_rate_over(&self, steps: &[usize]) -> f64 {
        if steps.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0;
        for &i in steps {
            let s = &self.steps[i];
            acc += s.block_rates.iter().sum::<f64>() / s.block_rates.len() as f64;
        }
        acc / steps.len() as f64
    }
}

const SELECTIVITY_EPS: f64 = 1e-9;

/// `(rate_dynamic − rate_static) / (rate_dynamic + rate_static + ε)`.
pub fn selectivity_index(rate_dynamic: f64, rate_static: f64) -> f64 {
    (rate_dynamic - rate_static) / (rate_dynamic + rate_static + SELECTIVITY_EPS)
}

/// Mean rate per layer per phase label.
#[derive(Debug, Clone)]
pub struct PhaseRateSummary {
    pub phases: Vec<String>,
    /// `[phases, blocks]`
    pub layer_means: T64,
    /// Per-phase pooled hidden rate.
    pub pooled: Vec<f64>,
}

pub fn firing_rate_report(
    trace: &ActivityTrace,
    phase_labels: &[String],
) -> TensorResult<PhaseRateSummary> {
    if phase_labels.len() != trace.n_steps() {
        return Err(TensorError::Contract {
            op: "firing_rate_report",
            msg: format!(
                "{} labels for {} steps",
                phase_labels.len(),
                trace.n_steps()
            ),
        });
    }
    let mut phases: Vec<String> = Vec::new();
    for l in phase_labels {
        if !phases.contains(l) {
            phases.push(l.clone());
        }
    }
    let blocks = trace.n_blocks();
    let mut layer_means = T64::zeros(&[phases.len(), blocks]);
    let mut pooled = vec![0.0; phases.len()];
    for (p, phase) in phases.iter().enumerate() {
        let steps: Vec<usize> = phase_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| *l == phase)
            .map(|(i, _)| i)
            .collect();
        for b in 0..blocks {
            let mean = steps
                .iter()
                .map(|&i| trace.steps[i].block_rates[b])
                .sum::<f64>()
                / steps.len() as f64;
            layer_means.set2(p, b, mean);
        }
        pooled[p] = trace.mean_rate_over(&steps);
    }
    Ok(PhaseRateSummary {
        phases,
        layer_means,
        pooled,
    })
}

/// First-hidden-layer mean rate conditioned on the dominant action dim.
///
/// Dims are normalized by their episode-wise max |value| before the argmax;
/// all-zero steps are excluded, and rows with no dominated step are flagged
/// rather than NaN-filled.
pub fn neuron_kinematic_map(
    trace: &ActivityTrace,
    actions: &[ActionCommand],
) -> TensorResult<(T64, Vec<bool>)> {
    if actions.is_empty() || actions.len() != trace.n_steps() {
        return Err(TensorError::Contract {
            op: "neuron_kinematic_map",
            msg: format!("{} actions for {} steps", actions.len(), trace.n_steps()),
        });
    }
    let n_hidden = trace.steps[0].neuron_rates.cols();
    let mut maxima = [0.0f64; ACTION_DIMS];
    for a in actions {
        for (d, v) in a.to_vec().iter().enumerate() {
            maxima[d] = maxima[d].max(v.abs());
        }
    }
    let mut map = T64::zeros(&[ACTION_DIMS, n_hidden]);
    let mut counts = [0usize; ACTION_DIMS];
    for (i, a) in actions.iter().enumerate() {
        let vals = a.to_vec();
        let mut best = None;
        let mut best_mag = 0.0;
        for d in 0..ACTION_DIMS {
            if maxima[d] == 0.0 {
                continue;
            }
            let norm = vals[d].abs() / maxima[d];
            if norm > best_mag {
                best_mag = norm;
                best = Some(d);
            }
        }
        let Some(d) = best else { continue };
        counts[d] += 1;
        for j in 0..n_hidden {
            map.set2(d, j, map.at2(d, j) + trace.steps[i].neuron_rates.at2(0, j));
        }
    }
    let mut defined = vec![false; ACTION_DIMS];
    for d in 0..ACTION_DIMS {
        if counts[d] > 0 {
            defined[d] = true;
            let inv = 1.0 / counts[d] as f64;
            for j in 0..n_hidden {
                map.set2(d, j, map.at2(d, j) * inv);
            }
        }
    }
    Ok((map, defined))
}

impl SpinalNet {
    pub fn init(cfg: SpinalConfig, rng: &mut Rng) -> Self {
        cfg.lif.validate().expect("valid lif config");
        let scale_in = 1.0 / (cfg.input_dim as f64).sqrt();
        let scale_h = 1.0 / (cfg.n_hidden as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|_| SpinalBlock {
                w: T64::from_fn(&[cfg.n_hidden, cfg.n_hidden], |_| {
                    rng.normal_scaled(scale_h)
                }),
                b: T64::zeros(&[cfg.n_hidden]),
            })
            .collect();
        SpinalNet {
            w_in: T64::from_fn(&[cfg.n_hidden, cfg.input_dim], |_| {
                rng.normal_scaled(scale_in)
            }),
            b_in: T64::zeros(&[cfg.n_hidden]),
            blocks,
            w_out: T64::from_fn(&[cfg.n_out, cfg.n_hidden], |_| rng.normal_scaled(scale_h)),
            single_step: false,
            probe_neurons: Vec::new(),
            states: (0..cfg.blocks)
                .map(|_| reset_state(cfg.n_hidden).expect("n_hidden >= 1"))
                .collect(),
            u_out: T64::zeros(&[cfg.n_out]),
            cfg,
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &T64)) {
        f("spinal.w_in", &self.w_in);
        f("spinal.b_in", &self.b_in);
        for (i, blk) in self.blocks.iter().enumerate() {
            f(&format!("spinal.block{i}.w"), &blk.w);
            f(&format!("spinal.block{i}.b"), &blk.b);
        }
        f("spinal.w_out", &self.w_out);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut T64)) {
        f("spinal.w_in", &mut self.w_in);
        f("spinal.b_in", &mut self.b_in);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            f(&format!("spinal.block{i}.w"), &mut blk.w);
            f(&format!("spinal.block{i}.b"), &mut blk.b);
        }
        f("spinal.w_out", &mut self.w_out);
    }

    pub fn register(
        &self,
        tape: &mut Tape64,
        out: &mut Vec<NodeId>,
    ) -> Result<SpinalParamIds, crate::autodiff::AutodiffError> {
        let w_in = tape.leaf(self.w_in.clone())?;
        let b_in = tape.leaf(self.b_in.clone())?;
        let mut blocks = Vec::new();
        for blk in &self.blocks {
            blocks.push((tape.leaf(blk.w.clone())?, tape.leaf(blk.b.clone())?));
        }
        let w_out = tape.leaf(self.w_out.clone())?;
        out.push(w_in);
        out.push(b_in);
        for &(w, b) in &blocks {
            out.push(w);
            out.push(b);
        }
        out.push(w_out);
        Ok(SpinalParamIds {
            w_in,
            b_in,
            blocks,
            w_out,
        })
    }

    pub fn states(&self) -> &[MembraneState<f64>] {
        &self.states
    }

    pub fn u_out(&self) -> &T64 {
        &self.u_out
    }

    /// Episode boundary: zero all membranes, previous spikes, integrators.
    pub fn reset_episode(&mut self) {
        for st in &mut self.states {
            *st = reset_state(self.cfg.n_hidden).expect("n_hidden >= 1");
        }
        self.u_out = T64::zeros(&[self.cfg.n_out]);
    }

    /// Copy membrane state out, e.g. to carry across a tape boundary.
    pub fn snapshot_state(&self) -> (Vec<MembraneState<f64>>, T64) {
        (self.states.clone(), self.u_out.clone())
    }

    pub fn restore_state(&mut self, states: Vec<MembraneState<f64>>, u_out: T64) {
        self.states = states;
        self.u_out = u_out;
    }

    /// One control step: inject the flattened latent for T timesteps and
    /// read the integrator. Returns the command and this step's activity.
    pub fn forward(&mut self, z_mod: &T64) -> TensorResult<(ActionCommand, StepActivity)> {
        let cfg = self.cfg;
        let z = z_mod.reshaped(&[cfg.input_dim]).map_err(|_| {
            TensorError::ShapeMismatch {
                op: "spinal_forward",
                lhs: vec![cfg.input_dim],
                rhs: z_mod.shape().to_vec(),
            }
        })?;
        if self.single_step {
            // Temporal ablation: no decoder state of any kind survives a
            // control step, the output integrator included.
            for st in &mut self.states {
                *st = reset_state(cfg.n_hidden)?;
            }
            self.u_out = T64::zeros(&[cfg.n_out]);
        } else if cfg.out_reset_per_step {
            self.u_out = T64::zeros(&[cfg.n_out]);
        }
        let proj = self.w_in.matmul(&z)?.add(&self.b_in)?;

        let t_window = cfg.lif.window;
        let mut spike_counts = T64::zeros(&[cfg.blocks, cfg.n_hidden]);
        let mut probes: Vec<Vec<f64>> = vec![Vec::with_capacity(t_window); self.probe_neurons.len()];
        let mut readout_sum = T64::zeros(&[cfg.n_out]);

        for _tau in 0..t_window {
            let mut x = proj.clone();
            let mut spike_stream = Tensor::zeros(&[cfg.n_hidden]);
            for (l, blk) in self.blocks.iter().enumerate() {
                let current = blk.w.matmul(&x)?.add(&blk.b)?;
                let (spikes, next) = lif_step(&self.states[l], &current, &cfg.lif)?;
                for j in 0..cfg.n_hidden {
                    spike_counts.set2(l, j, spike_counts.at2(l, j) + spikes.at(j));
                }
                for (p, &(pb, pn)) in self.probe_neurons.iter().enumerate() {
                    if pb == l {
                        probes[p].push(next.u.at(pn));
                    }
                }
                self.states[l] = next;
                x = x.add(&spikes)?;
                spike_stream = spike_stream.add(&spikes)?;
            }
            let influx = match cfg.readout_source {
                ReadoutSource::Stream => self.w_out.matmul(&x)?,
                ReadoutSource::Spikes => self.w_out.matmul(&spike_stream)?,
            };
            self.u_out = self.u_out.scale(cfg.out_beta).add(&influx)?;
            readout_sum = readout_sum.add(&self.u_out)?;
        }

        let inv_t = 1.0 / t_window as f64;
        let action_vec = match cfg.readout {
            Readout::Last => self.u_out.scale(inv_t),
            Readout::Mean => readout_sum.scale(2.0 / (t_window * (t_window + 1)) as f64),
        };
        if !action_vec.all_finite() {
            return Err(TensorError::NonFinite {
                op: "spinal_forward",
            });
        }

        let inv_window = 1.0 / t_window as f64;
        let neuron_rates = spike_counts.map(|c| c * inv_window);
        let block_rates: Vec<f64> = (0..cfg.blocks)
            .map(|l| {
                (0..cfg.n_hidden)
                    .map(|j| neuron_rates.at2(l, j))
                    .sum::<f64>()
                    / cfg.n_hidden as f64
            })
            .collect();
        let any_spike: Vec<Vec<bool>> = (0..cfg.blocks)
            .map(|l| {
                (0..cfg.n_hidden)
                    .map(|j| neuron_rates.at2(l, j) > 0.0)
                    .collect()
            })
            .collect();
        let proj_abs = proj.as_slice().iter().map(|v| v.abs()).collect();

        let action = ActionCommand::from_slice(action_vec.as_slice());
        Ok((
            action,
            StepActivity {
                block_rates,
                neuron_rates,
                any_spike,
                proj_abs,
                probes,
            },
        ))
    }

    /// Fresh carried-state leaves (episode start) on a tape.
    pub fn zero_state_ids(
        &self,
        tape: &mut Tape64,
    ) -> Result<SpinalStateIds, crate::autodiff::AutodiffError> {
        let mut membranes = Vec::new();
        for _ in 0..self.cfg.blocks {
            let u = tape.leaf(T64::zeros(&[self.cfg.n_hidden]))?;
            let s = tape.leaf(T64::zeros(&[self.cfg.n_hidden]))?;
            membranes.push((u, s));
        }
        let u_out = tape.leaf(T64::zeros(&[self.cfg.n_out]))?;
        Ok(SpinalStateIds { membranes, u_out })
    }

    /// Same control step as [`SpinalNet::forward`], recorded on a tape.
    /// `smooth_reference` swaps the hard spike for the smooth fast sigmoid,
    /// giving the exactly-differentiable network used by gradient checks.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape64,
        ids: &SpinalParamIds,
        z_mod: NodeId,
        state: SpinalStateIds,
        smooth_reference: bool,
    ) -> Result<(NodeId, SpinalStateIds), crate::autodiff::AutodiffError> {
        let cfg = self.cfg;
        let z = tape.reshape(z_mod, &[cfg.input_dim])?;
        let wz = tape.matmul(ids.w_in, z)?;
        let proj = tape.add(wz, ids.b_in)?;

        let mut membranes = state.membranes;
        let mut u_out = if cfg.out_reset_per_step || self.single_step {
            tape.leaf(T64::zeros(&[cfg.n_out]))?
        } else {
            state.u_out
        };
        let mut readout_sum = tape.leaf(T64::zeros(&[cfg.n_out]))?;

        for _tau in 0..cfg.lif.window {
            let mut x = proj;
            let mut spike_stream: Option<NodeId> = None;
            for (l, &(w, b)) in ids.blocks.iter().enumerate() {
                let wx = tape.matmul(w, x)?;
                let current = tape.add(wx, b)?;
                let (u_prev, s_prev) = membranes[l];
                let (u_next, spikes) = match cfg.lif.reset_mode {
                    ResetMode::DelayedSoft => {
                        let decayed = tape.scale(u_prev, cfg.lif.beta)?;
                        let charged = tape.add(decayed, current)?;
                        let reset = tape.scale(s_prev, cfg.lif.theta)?;
                        let u = tape.sub(charged, reset)?;
                        let s = if smooth_reference {
                            tape.fast_sigmoid(u, cfg.lif.theta, cfg.lif.surrogate_scale)?
                        } else {
                            tape.spike(u, cfg.lif.theta, cfg.lif.surrogate_scale)?
                        };
                        (u, s)
                    }
                    ResetMode::ImmediateSoft => {
                        let decayed = tape.scale(u_prev, cfg.lif.beta)?;
                        let pre = tape.add(decayed, current)?;
                        let s = if smooth_reference {
                            tape.fast_sigmoid(pre, cfg.lif.theta, cfg.lif.surrogate_scale)?
                        } else {
                            tape.spike(pre, cfg.lif.theta, cfg.lif.surrogate_scale)?
                        };
                        let reset = tape.scale(s, cfg.lif.theta)?;
                        let u = tape.sub(pre, reset)?;
                        (u, s)
                    }
                };
                membranes[l] = (u_next, spikes);
                x = tape.add(x, spikes)?;
                spike_stream = Some(match spike_stream {
                    None => spikes,
                    Some(acc) => tape.add(acc, spikes)?,
                });
            }
            let influx = match cfg.readout_source {
                ReadoutSource::Stream => tape.matmul(ids.w_out, x)?,
                ReadoutSource::Spikes => {
                    let s = spike_stream.expect("at least one block");
                    tape.matmul(ids.w_out, s)?
                }
            };
            let decayed_out = tape.scale(u_out, cfg.out_beta)?;
            u_out = tape.add(decayed_out, influx)?;
            readout_sum = tape.add(readout_sum, u_out)?;
        }

        let t_window = cfg.lif.window;
        let action = match cfg.readout {
            Readout::Last => tape.scale(u_out, 1.0 / t_window as f64)?,
            Readout::Mean => {
                tape.scale(readout_sum, 2.0 / (t_window * (t_window + 1)) as f64)?
            }
        };
        Ok((action, SpinalStateIds { membranes, u_out }))
    }
}
