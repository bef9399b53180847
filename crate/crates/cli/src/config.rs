//! Experiment configuration: one JSON document drives training, evaluation,
//! and every figure-level protocol. Unknown keys are rejected at parse time;
//! the published `config.schema.json` at the repo root documents the layout.

use neuroctl_core::cerebellar::{GateMode, ReflexConfig, StateScale};
use neuroctl_core::lif::{LifConfig, ResetMode};
use neuroctl_core::plant::{Obstacle, PlantConfig, TaskSpec};
use neuroctl_core::runner::SuccessTolerances;
use neuroctl_core::spinal::{Readout, ReadoutSource, SpinalConfig};
use neuroctl_core::stack::StackConfig;
use neuroctl_core::trainer::{DemoOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackSection {
    pub joints: usize,
    pub history: usize,
    pub gru_hidden: usize,
    pub tokens: usize,
    pub channels: usize,
    pub gate: GateMode,
    pub refine_cycles: usize,
    pub n_hidden: usize,
    pub blocks: usize,
    pub lif_beta: f64,
    pub lif_theta: f64,
    pub lif_window: usize,
    pub lif_reset: ResetMode,
    pub surrogate_scale: f64,
    pub out_beta: f64,
    pub out_reset_per_step: bool,
    pub readout: Readout,
    pub readout_source: ReadoutSource,
    pub no_cerebellum: bool,
    pub single_step_snn: bool,
}

impl Default for StackSection {
    fn default() -> Self {
        StackSection {
            joints: 6,
            history: 6,
            gru_hidden: 24,
            tokens: 2,
            channels: 12,
            gate: GateMode::PerChannel,
            refine_cycles: 2,
            n_hidden: 48,
            blocks: 2,
            lif_beta: 0.9,
            lif_theta: 1.0,
            lif_window: 4,
            lif_reset: ResetMode::DelayedSoft,
            surrogate_scale: 1.0,
            out_beta: 1.0,
            out_reset_per_step: true,
            readout: Readout::Last,
            readout_source: ReadoutSource::Spikes,
            no_cerebellum: false,
            single_step_snn: false,
        }
    }
}

impl StackSection {
    pub fn to_stack_config(&self) -> StackConfig {
        StackConfig {
            joints: self.joints,
            history: self.history,
            gru_hidden: self.gru_hidden,
            tokens: self.tokens,
            channels: self.channels,
            gate: self.gate,
            refine_cycles: self.refine_cycles,
            spinal: SpinalConfig {
                input_dim: self.tokens * self.channels,
                n_hidden: self.n_hidden,
                blocks: self.blocks,
                n_out: neuroctl_core::action::ACTION_DIMS,
                lif: LifConfig {
                    beta: self.lif_beta,
                    theta: self.lif_theta,
                    window: self.lif_window,
                    reset_mode: self.lif_reset,
                    surrogate_scale: self.surrogate_scale,
                },
                out_beta: self.out_beta,
                out_reset_per_step: self.out_reset_per_step,
                readout: self.readout,
                readout_source: self.readout_source,
            },
            state_scale: StateScale::default(),
            no_cerebellum: self.no_cerebellum,
            single_step_snn: self.single_step_snn,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    pub n: usize,
    pub tremor_sigma: f64,
    pub freeze_prob: f64,
    pub freeze_window: (f64, f64),
    pub action_noise_sigma: f64,
    pub hold_plant: bool,
    pub seed: u64,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection {
            n: 8,
            tremor_sigma: 0.0,
            freeze_prob: 0.0,
            freeze_window: (0.4, 0.7),
            action_noise_sigma: 0.002,
            hold_plant: false,
            seed: 100,
        }
    }
}

impl DemoSection {
    pub fn to_options(&self, plant: PlantConfig) -> DemoOptions {
        DemoOptions {
            tremor_sigma: self.tremor_sigma,
            freeze_prob: self.freeze_prob,
            freeze_window: self.freeze_window,
            action_noise_sigma: self.action_noise_sigma,
            hold_plant: self.hold_plant,
            plant,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub cortical_delay: usize,
    pub tremor_sigma: f64,
    pub freeze_at: Option<usize>,
    pub reflex: Option<ReflexConfig>,
    pub obstacles: Vec<Obstacle>,
    pub hold_zero_until: Option<usize>,
    pub tolerances: SuccessTolerances,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            cortical_delay: 0,
            tremor_sigma: 0.0,
            freeze_at: None,
            reflex: None,
            obstacles: Vec::new(),
            hold_zero_until: None,
            tolerances: SuccessTolerances::default(),
        }
    }
}

/// Pass/fail thresholds; defaults match the acceptance criteria.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Smoothing: required % jerk reduction, averaged over seeds.
    pub maj_reduction_pct: f64,
    /// Smoothing: required % acceleration reduction.
    pub maca_reduction_pct: f64,
    /// Sparsity: static-phase rate must not exceed this multiple of dynamic.
    pub static_rate_ratio: f64,
    /// Temporal memory: single-step success ceiling over chance (points).
    pub single_step_margin: f64,
    /// Temporal memory: multi-step success floor over chance (points).
    pub multi_step_margin: f64,
    /// Reflex: required tick latency through the fast path.
    pub reflex_ticks: usize,
    /// Reflex: minimum tick latency via the delayed planner.
    pub cortical_min_ticks: usize,
    /// Rhythm: commanded cycle count.
    pub cycles: usize,
    /// Rhythm: allowed period deviation in ticks.
    pub period_tol: f64,
    /// Processor: relative tolerance on calibrated latency/energy.
    pub calibration_rel_tol: f64,
    /// Attention: required mass on the instructed token.
    pub attention_mass: f64,
    /// Attention: required fraction of held-out scenes clearing the mass bar.
    pub attention_scene_frac: f64,
    /// Decoupling: required selectivity of the gripper-dominant group.
    pub decoupling_selectivity: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            maj_reduction_pct: 50.0,
            maca_reduction_pct: 25.0,
            static_rate_ratio: 0.5,
            single_step_margin: 0.10,
            multi_step_margin: 0.30,
            reflex_ticks: 1,
            cortical_min_ticks: 10,
            cycles: 3,
            period_tol: 1.0,
            calibration_rel_tol: 5e-3,
            attention_mass: 0.6,
            attention_scene_frac: 0.9,
            decoupling_selectivity: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystolicSection {
    pub rows: usize,
    pub cols: usize,
    pub clock_hz: f64,
    pub energy_per_cycle: f64,
    pub analog_activity_floor: f64,
}

impl Default for SystolicSection {
    fn default() -> Self {
        let (cfg, _) = neuroctl_core::systolic::calibrated_config();
        SystolicSection {
            rows: cfg.rows,
            cols: cfg.cols,
            clock_hz: cfg.clock_hz,
            energy_per_cycle: cfg.energy_per_cycle,
            analog_activity_floor: cfg.analog_activity_floor,
        }
    }
}

impl SystolicSection {
    pub fn to_array_config(&self) -> neuroctl_core::systolic::ArrayConfig {
        neuroctl_core::systolic::ArrayConfig {
            rows: self.rows,
            cols: self.cols,
            clock_hz: self.clock_hz,
            energy_per_cycle: self.energy_per_cycle,
            analog_activity_floor: self.analog_activity_floor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub stack: StackSection,
    pub trainer: TrainConfig,
    pub demos: DemoSection,
    pub plant: PlantConfig,
    pub tasks: Vec<TaskSpec>,
    pub eval: EvalSection,
    pub seeds: Vec<u64>,
    pub thresholds: Thresholds,
    pub systolic: SystolicSection,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stack: StackSection::default(),
            trainer: TrainConfig::default(),
            demos: DemoSection::default(),
            plant: PlantConfig::default(),
            tasks: Vec::new(),
            eval: EvalSection::default(),
            seeds: vec![1, 2, 3, 4, 5],
            thresholds: Thresholds::default(),
            systolic: SystolicSection::default(),
            out_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    /// Tuned per-protocol defaults used when no config file is given; a
    /// config file overrides every field. The choices are documented in the
    /// README table.
    pub fn defaults_for(experiment: &str) -> Self {
        let mut cfg = ExperimentConfig::default();
        match experiment {
            "smoothing" => {
                cfg.stack.lif_beta = 0.8;
                cfg.trainer.epochs = 60;
                cfg.trainer.lr = 2e-3;
                cfg.demos.n = 8;
                cfg.demos.tremor_sigma = 0.3;
            }
            "sparsity" | "decoupling" => {
                cfg.stack.lif_beta = 0.75;
                cfg.trainer.epochs = 80;
                cfg.trainer.lr = 2e-3;
                cfg.trainer.lr_decay = 0.97;
                cfg.demos.n = 12;
                cfg.demos.action_noise_sigma = 0.003;
            }
            "rhythm" => {
                cfg.stack.lif_beta = 0.85;
                // One full shake period in view: the window statistics then
                // identify phase and center without ambiguity.
                cfg.stack.history = 16;
                cfg.stack.gru_hidden = 24;
                cfg.trainer.epochs = 120;
                cfg.trainer.lr = 2e-3;
                cfg.trainer.lr_decay = 0.975;
                cfg.demos.n = 20;
                cfg.demos.tremor_sigma = 0.06;
                cfg.demos.freeze_prob = 0.6;
                cfg.demos.freeze_window = (0.25, 0.65);
                cfg.demos.action_noise_sigma = 0.001;
            }
            "multistep" => {
                cfg.stack.lif_beta = 0.98;
                cfg.stack.lif_window = 2;
                // Persistent output integrators carry state across the gap;
                // the single-step arm resets all decoder state per tick.
                cfg.stack.out_beta = 0.95;
                cfg.stack.out_reset_per_step = false;
                cfg.trainer.epochs = 80;
                cfg.trainer.lr = 2e-3;
                cfg.trainer.lr_decay = 0.97;
                cfg.demos.n = 24;
                cfg.demos.action_noise_sigma = 0.0;
            }
            _ => {}
        }
        cfg
    }

    /// Parse and validate, rejecting unknown keys with a line-anchored error.
    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::from_str_validated(&text)
    }

    pub fn from_str_validated(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| format!("config line {} column {}: {e}", e.line(), e.column()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.stack
            .to_stack_config()
            .validate()
            .map_err(|e| e.to_string())?;
        if self.trainer.lr < 0.0 {
            return Err("trainer.lr must be non-negative".into());
        }
        if self.seeds.is_empty() {
            return Err("seeds must be non-empty".into());
        }
        if self.stack.channels < neuroctl_core::cortical::latent::MIN_CHANNELS {
            return Err(format!(
                "stack.channels must be at least {}",
                neuroctl_core::cortical::latent::MIN_CHANNELS
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::from_str_validated(r#"{ "not_a_key": 1 }"#).unwrap_err();
        assert!(err.contains("line 1"), "{err}");
        assert!(err.contains("not_a_key"), "{err}");
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_str_validated(&text).unwrap();
        assert_eq!(back.seeds, cfg.seeds);
        assert_eq!(back.stack.n_hidden, cfg.stack.n_hidden);
    }
}
