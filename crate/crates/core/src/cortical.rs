//! Intent tier: a single-block query transformer distilling a synthetic
//! feature stack into the intent latent, scripted intent schedules for the
//! plant tasks, and a delay line modeling slow upstream inference.

use crate::autodiff::{NodeId, Tape};
use crate::cerebellar::CerebellarError;
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

type T64 = Tensor<f64>;
type Tape64 = Tape<f64>;

#[derive(Debug, Error)]
pub enum CorticalError {
    #[error("layer range [{start}, {end}] invalid for a {layers}-layer stack")]
    BadLayerRange {
        start: usize,
        end: usize,
        layers: usize,
    },
    #[error("tick {0} is not covered by any schedule phase")]
    UncoveredPhase(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

impl From<CerebellarError> for CorticalError {
    fn from(e: CerebellarError) -> Self {
        match e {
            CerebellarError::Tensor(t) => CorticalError::Tensor(t),
            CerebellarError::Autodiff(a) => CorticalError::Autodiff(a),
            other => CorticalError::Tensor(TensorError::Contract {
                op: "cortical",
                msg: other.to_string(),
            }),
        }
    }
}

pub type CorticalResult<T> = Result<T, CorticalError>;

// ── Feature stack and Q-Former ──────────────────────────────────────

/// Synthetic stand-in for a backbone's per-layer hidden states: one
/// `[N_tokens, D_feat]` matrix per layer.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<T64>,
}

impl FeatureStack {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.rows())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormerConfig {
    /// K learnable query tokens.
    pub queries: usize,
    /// Latent channel width D.
    pub d_model: usize,
    /// Feature width of the incoming stack.
    pub d_feat: usize,
    /// Inclusive 1-based range of stack layers to distill.
    pub layer_range: (usize, usize),
}

/// Single-head, single-block cross-attention bottleneck.
#[derive(Debug, Clone)]
pub struct QFormer {
    pub cfg: QFormerConfig,
    pub queries: T64,
    pub w_key: T64,
    pub w_value: T64,
    pub w_out: T64,
    pub b_out: T64,
}

pub struct QFormerParamIds {
    pub queries: NodeId,
    pub w_key: NodeId,
    pub w_value: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

impl QFormer {
    pub fn init(cfg: QFormerConfig, rng: &mut Rng) -> Self {
        let scale_q = 1.0 / (cfg.d_model as f64).sqrt();
        QFormer {
            cfg,
            queries: T64::from_fn(&[cfg.queries, cfg.d_model], |_| rng.normal_scaled(scale_q)),
            w_key: T64::from_fn(&[cfg.d_model, cfg.d_feat], |_| {
                rng.normal_scaled(1.0 / (cfg.d_feat as f64).sqrt())
            }),
            w_value: T64::from_fn(&[cfg.d_model, cfg.d_feat], |_| {
                rng.normal_scaled(1.0 / (cfg.d_feat as f64).sqrt())
            }),
            w_out: T64::from_fn(&[cfg.d_model, cfg.d_model], |_| rng.normal_scaled(scale_q)),
            b_out: T64::zeros(&[cfg.d_model]),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &T64)) {
        f("qformer.queries", &self.queries);
        f("qformer.w_key", &self.w_key);
        f("qformer.w_value", &self.w_value);
        f("qformer.w_out", &self.w_out);
        f("qformer.b_out", &self.b_out);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut T64)) {
        f("qformer.queries", &mut self.queries);
        f("qformer.w_key", &mut self.w_key);
        f("qformer.w_value", &mut self.w_value);
        f("qformer.w_out", &mut self.w_out);
        f("qformer.b_out", &mut self.b_out);
    }

    pub fn register(
        &self,
        tape: &mut Tape64,
        out: &mut Vec<NodeId>,
    ) -> CorticalResult<QFormerParamIds> {
        let ids = QFormerParamIds {
            queries: tape.leaf(self.queries.clone())?,
            w_key: tape.leaf(self.w_key.clone())?,
            w_value: tape.leaf(self.w_value.clone())?,
            w_out: tape.leaf(self.w_out.clone())?,
            b_out: tape.leaf(self.b_out.clone())?,
        };
        out.extend([ids.queries, ids.w_key, ids.w_value, ids.w_out, ids.b_out]);
        Ok(ids)
    }

    /// Concatenate the selected layers along the token axis.
    pub fn gather_tokens(&self, stack: &FeatureStack) -> CorticalResult<T64> {
        let (start, end) = self.cfg.layer_range;
        if start < 1 || start > end || end > stack.n_layers() {
            return Err(CorticalError::BadLayerRange {
                start,
                end,
                layers: stack.n_layers(),
            });
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for layer in &stack.layers[start - 1..end] {
            for r in 0..layer.rows() {
                rows.push(layer.row(r).to_vec());
            }
        }
        Ok(T64::from_rows(&rows)?)
    }

    /// Cross-attention distillation on the tape. Returns `(z_sem, attn)`;
    /// attention rows are softmax-normalized over the gathered tokens.
    pub fn distill_on_tape(
        &self,
        tape: &mut Tape64,
        ids: &QFormerParamIds,
        tokens: NodeId,
    ) -> CorticalResult<(NodeId, NodeId)> {
        // K̃ = tokens·W_kᵀ, Ṽ = tokens·W_vᵀ
        let wk_t = tape.transpose(ids.w_key)?;
        let keys = tape.matmul(tokens, wk_t)?;
        let wv_t = tape.transpose(ids.w_value)?;
        let values = tape.matmul(tokens, wv_t)?;

        let keys_t = tape.transpose(keys)?;
        let scores = tape.matmul(ids.queries, keys_t)?;
        let scaled = tape.scale(scores, 1.0 / (self.cfg.d_model as f64).sqrt())?;
        let attn = tape.softmax_rows(scaled)?;

        let ctx = tape.matmul(attn, values)?;
        let wo_t = tape.transpose(ids.w_out)?;
        let proj = tape.matmul(ctx, wo_t)?;
        let z_sem = tape.add(proj, ids.b_out)?;
        Ok((z_sem, attn))
    }

    /// Plain-value distillation: `(z_sem, attention weights)`.
    pub fn distill(&self, stack: &FeatureStack) -> CorticalResult<(T64, T64)> {
        let tokens = self.gather_tokens(stack)?;
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let ids = self.register(&mut tape, &mut params)?;
        let tok = tape.leaf(tokens)?;
        let (z, attn) = self.distill_on_tape(&mut tape, &ids, tok)?;
        Ok((tape.value(z).clone(), tape.value(attn).clone()))
    }
}

// ── Scripted intent ─────────────────────────────────────────────────

/// Injection strength of the transient cue channel.
pub const CUE_MAGNITUDE: f64 = 1.5;

/// Channel layout of the scripted intent latent (row 0 of z_sem).
pub mod latent {
    /// Channels 0..3: commanded translation direction (saturating scale).
    pub const TRANSLATION: usize = 0;
    /// Channels 3..6: commanded rotation.
    pub const ROTATION: usize = 3;
    /// Channel 6: gripper target.
    pub const GRIPPER: usize = 6;
    /// Channels 8..11: task mode flags.
    pub const MODE_REACH: usize = 8;
    pub const MODE_SHAKE: usize = 9;
    pub const MODE_GRIP: usize = 10;
    /// Channel 11: transient cue channel.
    pub const CUE: usize = 11;
    /// Minimum channel width a scripted latent needs.
    pub const MIN_CHANNELS: usize = 12;
}

/// What the intent tier can observe: pose at planner rate plus the force
/// reading its (slow) feedback channel would deliver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentObs {
    pub pose: [f64; 6],
    pub force: [f64; 3],
}

/// Deterministic per-phase latent generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LatentGen {
    /// Zero-motion latent.
    Zero,
    /// Fixed command vector written into row 0.
    Command(Vec<f64>),
    /// Remaining displacement toward a target pose, saturated per dim;
    /// needs the current pose observation.
    ReachTo { target: [f64; 6], sat: f64 },
    /// Constant approach that flips to withdrawal once the observed force
    /// magnitude crosses the threshold (planner-side contact reaction).
    ApproachRetract {
        approach: [f64; 3],
        force_threshold: f64,
    },
    /// Shake cue: sign on the axis channel flips every half period.
    ShakePhase {
        axis: usize,
        magnitude: f64,
        half_period: usize,
    },
    /// Gripper square wave between two targets.
    GripperWave {
        period: usize,
        low: f64,
        high: f64,
    },
    /// Transient direction cue on the cue channel.
    Cue { sign: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentPhase {
    /// Tick range [start, end).
    pub start: usize,
    pub end: usize,
    pub gen: LatentGen,
}

/// Per-episode schedule: phases must cover every queried tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSchedule {
    pub tokens: usize,
    pub channels: usize,
    pub phases: Vec<IntentPhase>,
}

impl IntentSchedule {
    /// Latent for a tick without an observation; reach phases need one.
    pub fn intent_at(&self, tick: usize) -> CorticalResult<T64> {
        self.intent(tick, None)
    }

    /// Latent for a tick. Row 0 carries the command; other rows stay zero.
    pub fn intent(&self, tick: usize, obs: Option<&IntentObs>) -> CorticalResult<T64> {
        let phase = self
            .phases
            .iter()
            .find(|p| tick >= p.start && tick < p.end)
            .ok_or(CorticalError::UncoveredPhase(tick))?;
        let need_obs = || {
            obs.ok_or_else(|| {
                CorticalError::Tensor(TensorError::Contract {
                    op: "scripted_intent",
                    msg: "phase needs a plant observation".into(),
                })
            })
        };
        let mut row = vec![0.0; self.channels];
        match &phase.gen {
            LatentGen::Zero => {}
            LatentGen::Command(cmd) => {
                for (c, &v) in cmd.iter().enumerate().take(self.channels) {
                    row[c] = v;
                }
            }
            LatentGen::ReachTo { target, sat } => {
                let obs = need_obs()?;
                for c in 0..6 {
                    row[c] = ((target[c] - obs.pose[c]) / sat).clamp(-1.0, 1.0);
                }
            }
            LatentGen::ApproachRetract {
                approach,
                force_threshold,
            } => {
                let obs = need_obs()?;
                let f_mag = obs.force.iter().map(|f| f * f).sum::<f64>().sqrt();
                let sign = if f_mag > *force_threshold { -1.0 } else { 1.0 };
                for c in 0..3 {
                    row[c] = sign * approach[c];
                }
            }
            LatentGen::ShakePhase {
                axis,
                magnitude,
                half_period,
            } => {
                let local = tick - phase.start;
                let sign = if (local / half_period).is_multiple_of(2) { 1.0 } else { -1.0 };
                row[*axis] = sign * magnitude;
                row[latent::MODE_SHAKE] = 1.0;
            }
            LatentGen::GripperWave { period, low, high } => {
                let local = tick - phase.start;
                let target = if (local / period).is_multiple_of(2) { *high } else { *low };
                row[latent::GRIPPER] = target;
                row[latent::MODE_GRIP] = 1.0;
            }
            LatentGen::Cue { sign } => {
                row[latent::CUE] = *sign * CUE_MAGNITUDE;
            }
        }
        let mut z = T64::zeros(&[self.tokens, self.channels]);
        for (c, &v) in row.iter().enumerate() {
            z.set2(0, c, v);
        }
        Ok(z)
    }
}

/// Module-level wrapper matching the scripted-intent contract.
pub fn scripted_intent(
    schedule: &IntentSchedule,
    tick: usize,
    obs: Option<&IntentObs>,
) -> CorticalResult<T64> {
    schedule.intent(tick, obs)
}

// ── Cortical latency model ──────────────────────────────────────────

/// Delays a latent stream by a fixed number of control ticks, holding the
/// first value until the pipeline fills: `out[t] = in[max(0, t − delay)]`.
#[derive(Debug, Clone)]
pub struct DelayLine {
    delay: usize,
    buf: VecDeque<T64>,
}

impl DelayLine {
    pub fn new(delay: usize) -> Self {
        DelayLine {
            delay,
            buf: VecDeque::with_capacity(delay + 1),
        }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    /// Feed this tick's value, get the delayed one.
    pub fn push(&mut self, z: T64) -> T64 {
        self.buf.push_back(z);
        if self.buf.len() > self.delay + 1 {
            self.buf.pop_front();
        }
        self.buf.front().expect("just pushed").clone()
    }
}

// ── Synthetic scenes for attentional selectivity ────────────────────

/// Token feature layout for synthetic scenes: identity one-hot, an
/// instructed flag (the top-down cue a fused backbone would provide),
/// a bottom-up salience channel, and a payload block to retrieve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub d_feat: usize,
    pub n_layers: usize,
    pub payload_dims: usize,
    /// Salience boost applied to one non-instructed distractor.
    pub distractor_salience: f64,
    /// Per-layer feature jitter.
    pub layer_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_objects: 2,
            d_feat: 12,
            n_layers: 2,
            payload_dims: 4,
            distractor_salience: 3.0,
            layer_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub stack: FeatureStack,
    /// Index of the instructed object token within a layer.
    pub instructed: usize,
    /// Payload of the instructed object, the retrieval target.
    pub payload: Vec<f64>,
}

/// Feature columns: [id one-hot | instructed flag | salience | payload...].
pub fn synth_scene(cfg: &SceneConfig, rng: &mut Rng) -> Scene {
    let id_cols = cfg.n_objects;
    let flag_col = id_cols;
    let salience_col = id_cols + 1;
    let payload_col = id_cols + 2;
    assert!(payload_col + cfg.payload_dims <= cfg.d_feat);

    let instructed = rng.index(cfg.n_objects);
    let distractor = (instructed + 1 + rng.index(cfg.n_objects - 1)) % cfg.n_objects;
    let mut payloads: Vec<Vec<f64>> = Vec::new();
    let mut base = T64::zeros(&[cfg.n_objects, cfg.d_feat]);
    for o in 0..cfg.n_objects {
        base.set2(o, o, 1.0);
        base.set2(o, flag_col, if o == instructed { 1.0 } else { 0.0 });
        let salience = if o == distractor {
            cfg.distractor_salience
        } else {
            rng.uniform()
        };
        base.set2(o, salience_col, salience);
        let payload: Vec<f64> = (0..cfg.payload_dims)
            .map(|_| rng.uniform_in(-1.0, 1.0))
            .collect();
        for (k, &v) in payload.iter().enumerate() {
            base.set2(o, payload_col + k, v);
        }
        payloads.push(payload);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let noisy =
            T64::from_fn(&[cfg.n_objects, cfg.d_feat], |i| {
                base.at(i) + rng.normal_scaled(cfg.layer_noise)
            });
        layers.push(noisy);
    }
    Scene {
        stack: FeatureStack { layers },
        instructed,
        payload: payloads[instructed].clone(),
    }
}

/// Fraction of total attention mass a query block places on the instructed
/// token, summed over its copies across concatenated layers.
pub fn instructed_attention_mass(attn: &T64, instructed: usize, tokens_per_layer: usize) -> f64 {
    let (k, m) = (attn.rows(), attn.cols());
    let mut mass = 0.0;
    for q in 0..k {
        for col in 0..m {
            if col % tokens_per_layer == instructed {
                mass += attn.at2(q, col);
            }
        }
    }
    mass / k as f64
}
