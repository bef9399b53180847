//! The composed control stack: intent latent in, motor command out, with the
//! modulation tier and spiking decoder wired per the hierarchical
//! decomposition. Carries the runtime ablation switches used by the
//! comparison experiments.

use crate::action::ActionCommand;
use crate::autodiff::{NodeId, Tape};
use crate::cerebellar::{
    Cerebellum, CerebellumParamIds, CerebResultExt, FilmConfig, GateMode, GruConfig, StateHistory,
    StateScale,
};
use crate::rng::Rng;
use crate::spinal::{SpinalConfig, SpinalNet, SpinalParamIds, SpinalStateIds, StepActivity};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};

type T64 = Tensor<f64>;
type Tape64 = Tape<f64>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StackConfig {
    pub joints: usize,
    /// History window length H at sensor rate.
    pub history: usize,
    pub gru_hidden: usize,
    /// K intent tokens by D channels.
    pub tokens: usize,
    pub channels: usize,
    pub gate: GateMode,
    /// Refinement cycles; 1 disables the internal model loop.
    pub refine_cycles: usize,
    pub spinal: SpinalConfig,
    pub state_scale: StateScale,
    /// Bypass modulation entirely: z_mod := z_sem, reflex disabled.
    pub no_cerebellum: bool,
    /// Reset spiking membranes every control step.
    pub single_step_snn: bool,
}

impl StackConfig {
    pub fn state_dim(&self) -> usize {
        2 * self.joints + 7
    }

    pub fn latent_len(&self) -> usize {
        self.tokens * self.channels
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.spinal.input_dim != self.latent_len() {
            return Err(TensorError::Contract {
                op: "stack_config",
                msg: format!(
                    "spinal.input_dim {} must equal tokens*channels {}",
                    self.spinal.input_dim,
                    self.latent_len()
                ),
            });
        }
        if self.refine_cycles == 0 {
            return Err(TensorError::Contract {
                op: "stack_config",
                msg: "refine_cycles must be >= 1".into(),
            });
        }
        self.spinal.lif.validate()
    }
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            joints: 6,
            history: 10,
            gru_hidden: 64,
            tokens: 8,
            channels: 32,
            gate: GateMode::PerChannel,
            refine_cycles: 2,
            spinal: SpinalConfig::default(),
            state_scale: StateScale::default(),
            no_cerebellum: false,
            single_step_snn: false,
        }
    }
}

pub struct StackParamIds {
    pub cereb: CerebellumParamIds,
    pub spinal: SpinalParamIds,
    /// Every registered leaf, in the same order as `visit_params`.
    pub all: Vec<NodeId>,
}

/// Intent-to-command policy with persistent decoder state.
#[derive(Debug, Clone)]
pub struct ControlStack {
    pub cfg: StackConfig,
    pub cerebellum: Cerebellum,
    pub spinal: SpinalNet,
}

impl ControlStack {
    pub fn init(cfg: StackConfig, rng: &mut Rng) -> Self {
        cfg.validate().expect("valid stack config");
        let cerebellum = Cerebellum::init(
            GruConfig {
                input_dim: cfg.state_dim(),
                hidden_dim: cfg.gru_hidden,
            },
            FilmConfig {
                tokens: cfg.tokens,
                channels: cfg.channels,
                hidden: cfg.gru_hidden,
                gate: cfg.gate,
            },
            cfg.state_scale,
            rng,
        );
        let mut spinal = SpinalNet::init(cfg.spinal, rng);
        spinal.single_step = cfg.single_step_snn;
        ControlStack {
            cfg,
            cerebellum,
            spinal,
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &T64)) {
        self.cerebellum.visit_params(f);
        self.spinal.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut T64)) {
        self.cerebellum.visit_params_mut(f);
        self.spinal.visit_params_mut(f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _| n += 1);
        n
    }

    pub fn register(&self, tape: &mut Tape64) -> Result<StackParamIds, TensorError> {
        let mut all = Vec::new();
        let cereb = self.cerebellum.register(tape, &mut all).contract("register")?;
        let spinal = self
            .spinal
            .register(tape, &mut all)
            .map_err(|e| TensorError::Contract {
                op: "stack.register",
                msg: e.to_string(),
            })?;
        Ok(StackParamIds { cereb, spinal, all })
    }

    pub fn reset_episode(&mut self) {
        self.spinal.reset_episode();
    }

    /// One closed-loop control step from a warm history.
    pub fn act(
        &mut self,
        z_sem: &T64,
        hist: &StateHistory,
    ) -> Result<(ActionCommand, StepActivity), TensorError> {
        let z_mod = if self.cfg.no_cerebellum {
            z_sem.clone()
        } else {
            self.cerebellum
                .refine(z_sem, hist, self.cfg.refine_cycles)
                .contract("act")?
        };
        self.spinal.forward(&z_mod)
    }

    /// One teacher-forced control step on a training tape. Returns the
    /// action node, forward-model predictions, and the carried decoder state.
    #[allow(clippy::too_many_arguments)]
    pub fn tick_on_tape(
        &self,
        tape: &mut Tape64,
        ids: &StackParamIds,
        z_sem: NodeId,
        window: &[NodeId],
        spinal_state: SpinalStateIds,
        smooth_reference: bool,
    ) -> Result<(NodeId, Vec<NodeId>, SpinalStateIds), TensorError> {
        let (z_mod, predictions) = if self.cfg.no_cerebellum {
            (z_sem, Vec::new())
        } else {
            self.cerebellum
                .refine_on_tape(tape, &ids.cereb, z_sem, window, self.cfg.refine_cycles)
                .contract("tick_on_tape")?
        };
        let state_in = if self.cfg.single_step_snn {
            self.spinal
                .zero_state_ids(tape)
                .map_err(|e| TensorError::Contract {
                    op: "tick_on_tape",
                    msg: e.to_string(),
                })?
        } else {
            spinal_state
        };
        let (action, state_out) = self
            .spinal
            .forward_on_tape(tape, &ids.spinal, z_mod, state_in, smooth_reference)
            .map_err(|e| TensorError::Contract {
                op: "tick_on_tape",
                msg: e.to_string(),
            })?;
        Ok((action, predictions, state_out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cerebellar::StateVector;
    use crate::lif::LifConfig;

    pub(crate) fn tiny_stack_cfg() -> StackConfig {
        StackConfig {
            joints: 6,
            history: 4,
            gru_hidden: 8,
            tokens: 2,
            channels: 12,
            gate: GateMode::PerChannel,
            refine_cycles: 2,
            spinal: SpinalConfig {
                input_dim: 24,
                n_hidden: 10,
                blocks: 2,
                n_out: 7,
                lif: LifConfig::default(),
                out_beta: 1.0,
                out_reset_per_step: true,
                readout: Default::default(),
                readout_source: Default::default(),
            },
            state_scale: StateScale::default(),
            no_cerebellum: false,
            single_step_snn: false,
        }
    }

    #[test]
    fn config_validation_catches_dim_mismatch() {
        let mut cfg = tiny_stack_cfg();
        cfg.spinal.input_dim = 23;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn act_runs_end_to_end() {
        let cfg = tiny_stack_cfg();
        let mut rng = Rng::seed_from(2);
        let mut stack = ControlStack::init(cfg, &mut rng);
        let mut hist = StateHistory::new(cfg.history, 32);
        for _ in 0..cfg.history {
            hist.push_state(StateVector::zeros(6));
        }
        let z = T64::from_fn(&[2, 12], |i| 0.1 * i as f64);
        let (a, activity) = stack.act(&z, &hist).unwrap();
        assert!(a.is_finite());
        assert_eq!(activity.block_rates.len(), 2);
    }

    #[test]
    fn no_cerebellum_bypasses_modulation() {
        let mut cfg = tiny_stack_cfg();
        cfg.no_cerebellum = true;
        let mut rng = Rng::seed_from(3);
        let mut stack = ControlStack::init(cfg, &mut rng);

        // A second stack with identical weights but live modulation.
        let mut rng2 = Rng::seed_from(3);
        let mut cfg_on = cfg;
        cfg_on.no_cerebellum = false;
        let mut with_cereb = ControlStack::init(cfg_on, &mut rng2);
        // Give the modulation a reason to differ from identity.
        with_cereb.cerebellum.film.b_beta = T64::filled(&[12], 0.5);

        let mut hist = StateHistory::new(cfg.history, 32);
        let mut sv = StateVector::zeros(6);
        sv.joint_angles[0] = 0.3;
        for _ in 0..cfg.history {
            hist.push_state(sv.clone());
        }
        let z = T64::from_fn(&[2, 12], |i| 0.05 * (i as f64 - 8.0));
        let (a_bypass, _) = stack.act(&z, &hist).unwrap();
        let (a_mod, _) = with_cereb.act(&z, &hist).unwrap();
        assert_ne!(a_bypass, a_mod);
    }

    #[test]
    fn param_traversal_matches_registration_order() {
        let cfg = tiny_stack_cfg();
        let mut rng = Rng::seed_from(5);
        let stack = ControlStack::init(cfg, &mut rng);
        let mut names = Vec::new();
        stack.visit_params(&mut |n, t| names.push((n.to_string(), t.shape().to_vec())));
        let mut tape = Tape::new();
        let ids = stack.register(&mut tape).unwrap();
        assert_eq!(names.len(), ids.all.len());
        for (i, (name, shape)) in names.iter().enumerate() {
            assert_eq!(
                tape.value(ids.all[i]).shape(),
                shape.as_slice(),
                "param {name} out of order"
            );
        }
    }
}
