//! Recurrent proprioceptive modulation tier.
//!
//! A GRU folds the recent state history into a context vector `h_t`, a gated
//! FiLM head rewrites the intent latent with it,
//!
//! `z_mod = (1 + γ_t) ⊙ (z_sem · g_t) + β_t,   g_t = σ(W_g · Proj(h_t))`,
//!
//! and an iterative refinement loop re-runs both against a predicted next
//! state. A separate fast path watches the high-rate wrench ring and issues
//! retraction commands without touching the intent latent at all.

use crate::action::ActionCommand;
use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

type T64 = Tensor<f64>;
type Tape64 = Tape<f64>;

#[derive(Debug, Error)]
pub enum CerebellarError {
    #[error("history not warm: have {have} of {need} samples")]
    NotWarm { have: usize, need: usize },
    #[error("refine requires at least one cycle")]
    ZeroCycles,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type CerebResult<T> = Result<T, CerebellarError>;

/// Fold a module error into the generic contract-error space for callers
/// that operate at the tensor level.
pub trait CerebResultExt<T> {
    fn contract(self, op: &'static str) -> Result<T, TensorError>;
}

impl<T> CerebResultExt<T> for CerebResult<T> {
    fn contract(self, op: &'static str) -> Result<T, TensorError> {
        self.map_err(|e| match e {
            CerebellarError::Tensor(t) => t,
            other => TensorError::Contract {
                op,
                msg: other.to_string(),
            },
        })
    }
}

// ── Proprioceptive state ────────────────────────────────────────────

/// One proprioceptive sample: joint angles and velocities, 6-DoF wrench,
/// gripper aperture. `D_s = 2J + 7`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub joint_angles: Vec<f64>,
    pub joint_velocities: Vec<f64>,
    /// [Fx, Fy, Fz, Tx, Ty, Tz]
    pub wrench: [f64; 6],
    pub gripper: f64,
}

impl StateVector {
    pub fn zeros(joints: usize) -> Self {
        StateVector {
            joint_angles: vec![0.0; joints],
            joint_velocities: vec![0.0; joints],
            wrench: [0.0; 6],
            gripper: 0.0,
        }
    }

    pub fn dims(&self) -> usize {
        2 * self.joint_angles.len() + 7
    }

    pub fn is_valid(&self) -> bool {
        self.joint_angles.iter().all(|v| v.is_finite())
            && self.joint_velocities.iter().all(|v| v.is_finite())
            && self.wrench.iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.gripper)
    }

    /// Flatten with per-group scaling so heterogeneous units land on a
    /// comparable numeric range before entering the estimator.
    pub fn to_scaled_tensor(&self, scale: &StateScale) -> T64 {
        let mut v = Vec::with_capacity(self.dims());
        v.extend(self.joint_angles.iter().map(|a| a * scale.angle));
        v.extend(self.joint_velocities.iter().map(|a| a * scale.velocity));
        v.extend(self.wrench[..3].iter().map(|a| a * scale.force));
        v.extend(self.wrench[3..].iter().map(|a| a * scale.torque));
        v.push(self.gripper * scale.gripper);
        T64::from_vec(&[v.len()], v).expect("state layout is fixed")
    }
}

/// Fixed per-group input scaling for [`StateVector::to_scaled_tensor`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StateScale {
    pub angle: f64,
    pub velocity: f64,
    pub force: f64,
    pub torque: f64,
    pub gripper: f64,
}

impl Default for StateScale {
    fn default() -> Self {
        StateScale {
            angle: 1.0,
            velocity: 0.5,
            force: 0.05,
            torque: 0.05,
            gripper: 1.0,
        }
    }
}

/// Ring buffer of recent states plus a higher-rate wrench ring feeding the
/// reflex path. Single producer; snapshots are cheap clones.
#[derive(Debug, Clone)]
pub struct StateHistory {
    states: std::collections::VecDeque<StateVector>,
    cap: usize,
    wrench: std::collections::VecDeque<[f64; 6]>,
    wrench_cap: usize,
}

impl StateHistory {
    pub fn new(cap: usize, wrench_cap: usize) -> Self {
        StateHistory {
            states: std::collections::VecDeque::with_capacity(cap + 1),
            cap,
            wrench: std::collections::VecDeque::with_capacity(wrench_cap + 1),
            wrench_cap,
        }
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.states.len() == self.cap
    }

    pub fn push_state(&mut self, sv: StateVector) {
        if self.states.len() == self.cap {
            self.states.pop_front();
        }
        self.states.push_back(sv);
    }

    /// High-rate wrench samples arrive separately from full state samples.
    pub fn push_wrench(&mut self, w: [f64; 6]) {
        if self.wrench.len() == self.wrench_cap {
            self.wrench.pop_front();
        }
        self.wrench.push_back(w);
    }

    pub fn states(&self) -> impl Iterator<Item = &StateVector> {
        self.states.iter()
    }

    pub fn newest(&self) -> Option<&StateVector> {
        self.states.back()
    }

    pub fn wrench_len(&self) -> usize {
        self.wrench.len()
    }

    pub fn wrench_samples(&self) -> impl Iterator<Item = &[f64; 6]> {
        self.wrench.iter()
    }

    pub fn scaled_sequence(&self, scale: &StateScale) -> Vec<T64> {
        self.states.iter().map(|s| s.to_scaled_tensor(scale)).collect()
    }
}

// ── GRU state estimator ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Standard update/reset/candidate GRU, hidden state zeroed at every call:
/// the window carries the memory, not the estimator.
#[derive(Debug, Clone)]
pub struct GruEstimator {
    pub cfg: GruConfig,
    pub wz: T64,
    pub uz: T64,
    pub bz: T64,
    pub wr: T64,
    pub ur: T64,
    pub br: T64,
    pub wn: T64,
    pub un: T64,
    pub bn: T64,
}

pub struct GruParamIds {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wn: NodeId,
    pub un: NodeId,
    pub bn: NodeId,
}

fn init_matrix(rng: &mut Rng, rows: usize, cols: usize) -> T64 {
    let scale = 1.0 / (cols as f64).sqrt();
    T64::from_fn(&[rows, cols], |_| rng.normal_scaled(scale))
}

impl GruEstimator {
    pub fn init(cfg: GruConfig, rng: &mut Rng) -> Self {
        let (h, x) = (cfg.hidden_dim, cfg.input_dim);
        GruEstimator {
            cfg,
            wz: init_matrix(rng, h, x),
            uz: init_matrix(rng, h, h),
            bz: T64::zeros(&[h]),
            wr: init_matrix(rng, h, x),
            ur: init_matrix(rng, h, h),
            br: T64::zeros(&[h]),
            wn: init_matrix(rng, h, x),
            un: init_matrix(rng, h, h),
            bn: T64::zeros(&[h]),
        }
    }

    /// Parameter traversal order is the contract shared by `register`,
    /// checkpointing, and the optimizer. Keep them in sync.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &T64)) {
        f("gru.wz", &self.wz);
        f("gru.uz", &self.uz);
        f("gru.bz", &self.bz);
        f("gru.wr", &self.wr);
        f("gru.ur", &self.ur);
        f("gru.br", &self.br);
        f("gru.wn", &self.wn);
        f("gru.un", &self.un);
        f("gru.bn", &self.bn);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut T64)) {
        f("gru.wz", &mut self.wz);
        f("gru.uz", &mut self.uz);
        f("gru.bz", &mut self.bz);
        f("gru.wr", &mut self.wr);
        f("gru.ur", &mut self.ur);
        f("gru.br", &mut self.br);
        f("gru.wn", &mut self.wn);
        f("gru.un", &mut self.un);
        f("gru.bn", &mut self.bn);
    }

    pub fn register(&self, tape: &mut Tape64, out: &mut Vec<NodeId>) -> CerebResult<GruParamIds> {
        let ids = GruParamIds {
            wz: tape.leaf(self.wz.clone())?,
            uz: tape.leaf(self.uz.clone())?,
            bz: tape.leaf(self.bz.clone())?,
            wr: tape.leaf(self.wr.clone())?,
            ur: tape.leaf(self.ur.clone())?,
            br: tape.leaf(self.br.clone())?,
            wn: tape.leaf(self.wn.clone())?,
            un: tape.leaf(self.un.clone())?,
            bn: tape.leaf(self.bn.clone())?,
        };
        out.extend([
            ids.wz, ids.uz, ids.bz, ids.wr, ids.ur, ids.br, ids.wn, ids.un, ids.bn,
        ]);
        Ok(ids)
    }

    /// Fold the recurrence over `xs` (oldest first), zero initial hidden.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape64,
        ids: &GruParamIds,
        xs: &[NodeId],
    ) -> CerebResult<NodeId> {
        let mut h = tape.leaf(T64::zeros(&[self.cfg.hidden_dim]))?;
        for &x in xs {
            let wzx = tape.matmul(ids.wz, x)?;
            let uzh = tape.matmul(ids.uz, h)?;
            let z_pre = tape.add(wzx, uzh)?;
            let z_pre = tape.add(z_pre, ids.bz)?;
            let z = tape.sigmoid(z_pre)?;

            let wrx = tape.matmul(ids.wr, x)?;
            let urh = tape.matmul(ids.ur, h)?;
            let r_pre = tape.add(wrx, urh)?;
            let r_pre = tape.add(r_pre, ids.br)?;
            let r = tape.sigmoid(r_pre)?;

            let rh = tape.mul(r, h)?;
            let wnx = tape.matmul(ids.wn, x)?;
            let unrh = tape.matmul(ids.un, rh)?;
            let n_pre = tape.add(wnx, unrh)?;
            let n_pre = tape.add(n_pre, ids.bn)?;
            let n = tape.tanh(n_pre)?;

            // h' = (1 − z) ⊙ h + z ⊙ n
            let neg_z = tape.scale(z, -1.0)?;
            let one_minus_z = tape.offset(neg_z, 1.0)?;
            let keep = tape.mul(one_minus_z, h)?;
            let write = tape.mul(z, n)?;
            h = tape.add(keep, write)?;
        }
        Ok(h)
    }

    /// Plain-value context estimate over a warm history.
    pub fn estimate(&self, hist: &StateHistory, scale: &StateScale) -> CerebResult<T64> {
        if !hist.is_warm() {
            return Err(CerebellarError::NotWarm {
                have: hist.len(),
                need: hist.capacity(),
            });
        }
        let xs = hist.scaled_sequence(scale);
        self.estimate_sequence(&xs)
    }

    pub fn estimate_sequence(&self, xs: &[T64]) -> CerebResult<T64> {
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let ids = self.register(&mut tape, &mut params)?;
        let leaves: Vec<NodeId> = xs
            .iter()
            .map(|x| tape.leaf(x.clone()))
            .collect::<Result<_, _>>()?;
        let h = self.forward_on_tape(&mut tape, &ids, &leaves)?;
        Ok(tape.value(h).clone())
    }
}

/// Module-level wrapper matching the estimator's contract: final hidden
/// state of the GRU folded over the warm window.
pub fn estimate_context(
    gru: &GruEstimator,
    hist: &StateHistory,
    scale: &StateScale,
) -> CerebResult<T64> {
    gru.estimate(hist, scale)
}

// ── Gated FiLM modulation ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One gate value per latent channel.
    #[default]
    PerChannel,
    /// A single shared gate value.
    Scalar,
    /// Gate pinned to 1 (modulation without input gating).
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilmConfig {
    /// K: intent tokens (rows of z_sem).
    pub tokens: usize,
    /// D: channels per token.
    pub channels: usize,
    /// D_h: context vector width.
    pub hidden: usize,
    pub gate: GateMode,
}

/// Gate projection, scale head, and shift head. γ and β are per-channel and
/// broadcast across the K tokens.
#[derive(Debug, Clone)]
pub struct FilmModulator {
    pub cfg: FilmConfig,
    pub w_proj: T64,
    pub b_proj: T64,
    pub w_gate: T64,
    pub b_gate: T64,
    pub w_gamma: T64,
    pub b_gamma: T64,
    pub w_beta: T64,
    pub b_beta: T64,
}

pub struct FilmParamIds {
    pub w_proj: NodeId,
    pub b_proj: NodeId,
    pub w_gate: NodeId,
    pub b_gate: NodeId,
    pub w_gamma: NodeId,
    pub b_gamma: NodeId,
    pub w_beta: NodeId,
    pub b_beta: NodeId,
}

impl FilmModulator {
    pub fn init(cfg: FilmConfig, rng: &mut Rng) -> Self {
        let gate_dim = match cfg.gate {
            GateMode::PerChannel => cfg.channels,
            GateMode::Scalar => 1,
            GateMode::Off => 1,
        };
        FilmModulator {
            cfg,
            w_proj: init_matrix(rng, cfg.hidden, cfg.hidden),
            b_proj: T64::zeros(&[cfg.hidden]),
            w_gate: init_matrix(rng, gate_dim, cfg.hidden),
            b_gate: T64::zeros(&[gate_dim]),
            // Zero-initialized heads: modulation starts as the identity map.
            w_gamma: T64::zeros(&[cfg.channels, cfg.hidden]),
            b_gamma: T64::zeros(&[cfg.channels]),
            w_beta: T64::zeros(&[cfg.channels, cfg.hidden]),
            b_beta: T64::zeros(&[cfg.channels]),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &T64)) {
        f("film.w_proj", &self.w_proj);
        f("film.b_proj", &self.b_proj);
        f("film.w_gate", &self.w_gate);
        f("film.b_gate", &self.b_gate);
        f("film.w_gamma", &self.w_gamma);
        f("film.b_gamma", &self.b_gamma);
        f("film.w_beta", &self.w_beta);
        f("film.b_beta", &self.b_beta);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut T64)) {
        f("film.w_proj", &mut self.w_proj);
        f("film.b_proj", &mut self.b_proj);
        f("film.w_gate", &mut self.w_gate);
        f("film.b_gate", &mut self.b_gate);
        f("film.w_gamma", &mut self.w_gamma);
        f("film.b_gamma", &mut self.b_gamma);
        f("film.w_beta", &mut self.w_beta);
        f("film.b_beta", &mut self.b_beta);
    }

    pub fn register(&self, tape: &mut Tape64, out: &mut Vec<NodeId>) -> CerebResult<FilmParamIds> {
        let ids = FilmParamIds {
            w_proj: tape.leaf(self.w_proj.clone())?,
            b_proj: tape.leaf(self.b_proj.clone())?,
            w_gate: tape.leaf(self.w_gate.clone())?,
            b_gate: tape.leaf(self.b_gate.clone())?,
            w_gamma: tape.leaf(self.w_gamma.clone())?,
            b_gamma: tape.leaf(self.b_gamma.clone())?,
            w_beta: tape.leaf(self.w_beta.clone())?,
            b_beta: tape.leaf(self.b_beta.clone())?,
        };
        out.extend([
            ids.w_proj, ids.b_proj, ids.w_gate, ids.b_gate, ids.w_gamma, ids.b_gamma, ids.w_beta,
            ids.b_beta,
        ]);
        Ok(ids)
    }

    /// `z_mod = (1 + γ) ⊙ (z_sem · g) + β`, γ/β/g broadcast over tokens.
    pub fn modulate_on_tape(
        &self,
        tape: &mut Tape64,
        ids: &FilmParamIds,
        z_sem: NodeId,
        h: NodeId,
    ) -> CerebResult<NodeId> {
        let gated = match self.cfg.gate {
            GateMode::Off => z_sem,
            mode => {
                let proj = tape.matmul(ids.w_proj, h)?;
                let proj = tape.add(proj, ids.b_proj)?;
                let g_pre = tape.matmul(ids.w_gate, proj)?;
                let g_pre = tape.add(g_pre, ids.b_gate)?;
                let g = tape.sigmoid(g_pre)?;
                let g_row = match mode {
                    GateMode::PerChannel => g,
                    GateMode::Scalar => {
                        // Tile the scalar across channels so it broadcasts per row.
                        let ones = tape.leaf(T64::filled(&[self.cfg.channels, 1], 1.0))?;
                        tape.matmul(ones, g)?
                    }
                    GateMode::Off => unreachable!(),
                };
                tape.mul(z_sem, g_row)?
            }
        };
        let gamma = tape.matmul(ids.w_gamma, h)?;
        let gamma = tape.add(gamma, ids.b_gamma)?;
        let beta = tape.matmul(ids.w_beta, h)?;
        let beta = tape.add(beta, ids.b_beta)?;
        let one_plus_gamma = tape.offset(gamma, 1.0)?;
        let scaled = tape.mul(gated, one_plus_gamma)?;
        Ok(tape.add(scaled, beta)?)
    }

    /// Plain-value modulation.
    pub fn modulate(&self, z_sem: &T64, h: &T64) -> CerebResult<T64> {
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let ids = self.register(&mut tape, &mut params)?;
        let z = tape.leaf(z_sem.clone())?;
        let hh = tape.leaf(h.clone())?;
        let out = self.modulate_on_tape(&mut tape, &ids, z, hh)?;
        Ok(tape.value(out).clone())
    }

    /// Gate activations for inspection; always in (0, 1).
    pub fn gate_values(&self, h: &T64) -> CerebResult<T64> {
        let proj = self.w_proj.matmul(h)?.add(&self.b_proj)?;
        let pre = self.w_gate.matmul(&proj)?.add(&self.b_gate)?;
        Ok(pre.map(|x| 1.0 / (1.0 + (-x).exp())))
    }
}

/// Module-level wrapper over [`FilmModulator::modulate`].
pub fn modulate(film: &FilmModulator, z_sem: &T64, h: &T64) -> CerebResult<T64> {
    film.modulate(z_sem, h)
}

// ── Forward internal model ──────────────────────────────────────────

/// Linear head predicting the next (scaled) state from context and latent.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub w: T64,
    pub b: T64,
}

pub struct ForwardParamIds {
    pub w: NodeId,
    pub b: NodeId,
}

impl ForwardModel {
    pub fn init(hidden: usize, latent: usize, state_dim: usize, rng: &mut Rng) -> Self {
        ForwardModel {
            w: init_matrix(rng, state_dim, hidden + latent),
            b: T64::zeros(&[state_dim]),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &T64)) {
        f("fwd.w", &self.w);
        f("fwd.b", &self.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut T64)) {
        f("fwd.w", &mut self.w);
        f("fwd.b", &mut self.b);
    }

    pub fn register(
        &self,
        tape: &mut Tape64,
        out: &mut Vec<NodeId>,
    ) -> CerebResult<ForwardParamIds> {
        let ids = ForwardParamIds {
            w: tape.leaf(self.w.clone())?,
            b: tape.leaf(self.b.clone())?,
        };
        out.extend([ids.w, ids.b]);
        Ok(ids)
    }

    pub fn predict_on_tape(
        &self,
        tape: &mut Tape64,
        ids: &ForwardParamIds,
        h: NodeId,
        z_mod_flat: NodeId,
    ) -> CerebResult<NodeId> {
        let joined = tape.concat(&[h, z_mod_flat])?;
        let wx = tape.matmul(ids.w, joined)?;
        Ok(tape.add(wx, ids.b)?)
    }
}

// ── Composed module with iterative refinement ───────────────────────

#[derive(Debug, Clone)]
pub struct Cerebellum {
    pub gru: GruEstimator,
    pub film: FilmModulator,
    pub forward_model: ForwardModel,
    pub state_scale: StateScale,
}

pub struct CerebellumParamIds {
    pub gru: GruParamIds,
    pub film: FilmParamIds,
    pub fwd: ForwardParamIds,
}

impl Cerebellum {
    pub fn init(
        gru_cfg: GruConfig,
        film_cfg: FilmConfig,
        state_scale: StateScale,
        rng: &mut Rng,
    ) -> Self {
        let latent = film_cfg.tokens * film_cfg.channels;
        Cerebellum {
            gru: GruEstimator::init(gru_cfg, rng),
            film: FilmModulator::init(film_cfg, rng),
            forward_model: ForwardModel::init(gru_cfg.hidden_dim, latent, gru_cfg.input_dim, rng),
            state_scale,
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &T64)) {
        self.gru.visit_params(f);
        self.film.visit_params(f);
        self.forward_model.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut T64)) {
        self.gru.visit_params_mut(f);
        self.film.visit_params_mut(f);
        self.forward_model.visit_params_mut(f);
    }

    pub fn register(
        &self,
        tape: &mut Tape64,
        out: &mut Vec<NodeId>,
    ) -> CerebResult<CerebellumParamIds> {
        Ok(CerebellumParamIds {
            gru: self.gru.register(tape, out)?,
            film: self.film.register(tape, out)?,
            fwd: self.forward_model.register(tape, out)?,
        })
    }

    /// K-cycle refinement over a scaled state sequence already on the tape.
    /// Cycle k predicts the next state, slides it into a copy of the window,
    /// and re-runs estimation and modulation. K = 1 is a single modulate.
    /// Also returns the next-state predictions made along the way so the
    /// forward model can be trained against measured successors.
    pub fn refine_on_tape(
        &self,
        tape: &mut Tape64,
        ids: &CerebellumParamIds,
        z_sem: NodeId,
        window: &[NodeId],
        cycles: usize,
    ) -> CerebResult<(NodeId, Vec<NodeId>)> {
        if cycles == 0 {
            return Err(CerebellarError::ZeroCycles);
        }
        let latent_len = self.film.cfg.tokens * self.film.cfg.channels;
        let mut xs: Vec<NodeId> = window.to_vec();
        let mut h = self.gru.forward_on_tape(tape, &ids.gru, &xs)?;
        let mut z_mod = self.film.modulate_on_tape(tape, &ids.film, z_sem, h)?;
        let mut predictions = Vec::new();
        for _ in 1..cycles {
            let z_flat = tape.reshape(z_mod, &[latent_len])?;
            let predicted = self
                .forward_model
                .predict_on_tape(tape, &ids.fwd, h, z_flat)?;
            predictions.push(predicted);
            xs.rotate_left(1);
            *xs.last_mut().expect("window is non-empty") = predicted;
            h = self.gru.forward_on_tape(tape, &ids.gru, &xs)?;
            z_mod = self.film.modulate_on_tape(tape, &ids.film, z_sem, h)?;
        }
        Ok((z_mod, predictions))
    }

    /// Plain-value refinement over a warm history.
    pub fn refine(&self, z_sem: &T64, hist: &StateHistory, cycles: usize) -> CerebResult<T64> {
        if !hist.is_warm() {
            return Err(CerebellarError::NotWarm {
                have: hist.len(),
                need: hist.capacity(),
            });
        }
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let ids = self.register(&mut tape, &mut params)?;
        let z = tape.leaf(z_sem.clone())?;
        let window: Vec<NodeId> = hist
            .scaled_sequence(&self.state_scale)
            .into_iter()
            .map(|x| tape.leaf(x))
            .collect::<Result<_, _>>()?;
        let (out, _predictions) = self.refine_on_tape(&mut tape, &ids, z, &window, cycles)?;
        Ok(tape.value(out).clone())
    }
}

// ── Fast force-reflex path ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflexConfig {
    /// Samples of the wrench ring used for the rolling baseline.
    pub force_window: usize,
    /// Deviation threshold in standard deviations.
    pub zscore_k: f64,
    /// Absolute floor added to the threshold, in newtons.
    pub floor: f64,
    /// Retraction translation per tick, meters per newton-direction.
    pub retraction_gain: f64,
    /// Ticks the retraction command is held.
    pub retraction_ticks: usize,
}

impl Default for ReflexConfig {
    fn default() -> Self {
        ReflexConfig {
            force_window: 20,
            zscore_k: 4.0,
            floor: 2.0,
            retraction_gain: 0.01,
            retraction_ticks: 5,
        }
    }
}

/// Retraction override produced by the reflex path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflexAction {
    pub command: ActionCommand,
    pub hold_ticks: usize,
}

fn reflex_check_at(samples: &[[f64; 6]], cfg: &ReflexConfig) -> Option<ReflexAction> {
    let n = samples.len();
    if n < cfg.force_window + 1 {
        return None;
    }
    let newest = &samples[n - 1];
    let window = &samples[n - 1 - cfg.force_window..n - 1];

    let mut triggered = false;
    for c in 0..3 {
        let mean = window.iter().map(|w| w[c]).sum::<f64>() / cfg.force_window as f64;
        let var = window
            .iter()
            .map(|w| (w[c] - mean) * (w[c] - mean))
            .sum::<f64>()
            / cfg.force_window as f64;
        let dev = (newest[c] - mean).abs();
        if dev > cfg.zscore_k * var.sqrt() + cfg.floor {
            triggered = true;
            break;
        }
    }
    if !triggered {
        return None;
    }

    let f = [newest[0], newest[1], newest[2]];
    let norm = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
    if norm == 0.0 {
        return None;
    }
    // The ring stores the reaction force on the effector, which points away
    // from whatever was hit; withdrawing means moving along it.
    let mut deltas = [0.0; 6];
    for c in 0..3 {
        deltas[c] = cfg.retraction_gain * f[c] / norm;
    }
    Some(ReflexAction {
        command: ActionCommand {
            deltas,
            gripper: 0.0,
        },
        hold_ticks: cfg.retraction_ticks,
    })
}

/// Pure function of the wrench ring: rolling mean/std of each force channel
/// over `force_window` samples excluding the newest; trigger when the newest
/// deviates by more than `k·σ + floor` on any channel. The returned command
/// retracts opposite the measured force and never consults the intent path.
pub fn reflex_check(hist: &StateHistory, cfg: &ReflexConfig) -> Option<ReflexAction> {
    let samples: Vec<[f64; 6]> = hist.wrench_samples().copied().collect();
    reflex_check_at(&samples, cfg)
}

/// Sensor-rate variant: evaluate the detector at each of the `recent` newest
/// ring positions, oldest first, returning the earliest trigger. A control
/// loop slower than the wrench channel calls this once per tick and still
/// reacts to the first out-of-band sample, not just the last.
pub fn reflex_scan(hist: &StateHistory, cfg: &ReflexConfig, recent: usize) -> Option<ReflexAction> {
    let samples: Vec<[f64; 6]> = hist.wrench_samples().copied().collect();
    let n = samples.len();
    for k in (0..recent.min(n)).rev() {
        if let Some(r) = reflex_check_at(&samples[..n - k], cfg) {
            return Some(r);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn warm_history(h: usize, sv: &StateVector) -> StateHistory {
        let mut hist = StateHistory::new(h, 64);
        for _ in 0..h {
            hist.push_state(sv.clone());
        }
        hist
    }

    #[test]
    fn state_vector_layout() {
        let sv = StateVector::zeros(6);
        assert_eq!(sv.dims(), 19);
        let t = sv.to_scaled_tensor(&StateScale::default());
        assert_eq!(t.len(), 19);
    }

    #[test]
    fn cold_history_is_an_error() {
        let mut rng = Rng::seed_from(3);
        let gru = GruEstimator::init(
            GruConfig {
                input_dim: 19,
                hidden_dim: 8,
            },
            &mut rng,
        );
        let mut hist = StateHistory::new(5, 16);
        hist.push_state(StateVector::zeros(6));
        let err = gru.estimate(&hist, &StateScale::default());
        assert!(matches!(err, Err(CerebellarError::NotWarm { have: 1, need: 5 })));
    }

    #[test]
    fn zero_history_zero_bias_fixed_point() {
        let mut rng = Rng::seed_from(5);
        let gru = GruEstimator::init(
            GruConfig {
                input_dim: 19,
                hidden_dim: 8,
            },
            &mut rng,
        );
        // Biases start at zero, so an all-zero window keeps h at tanh(0) = 0.
        let hist = warm_history(6, &StateVector::zeros(6));
        let h = gru.estimate(&hist, &StateScale::default()).unwrap();
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_gru_matches_hand_evaluated_gates() {
        // 1-dim input, 1-dim hidden, H=1, hand-set weights.
        let cfg = GruConfig {
            input_dim: 1,
            hidden_dim: 1,
        };
        let one = |v: f64| T64::from_vec(&[1, 1], vec![v]).unwrap();
        let vb = |v: f64| T64::from_vec(&[1], vec![v]).unwrap();
        let gru = GruEstimator {
            cfg,
            wz: one(0.5),
            uz: one(0.3),
            bz: vb(0.1),
            wr: one(-0.4),
            ur: one(0.2),
            br: vb(0.05),
            wn: one(0.7),
            un: one(-0.6),
            bn: vb(-0.2),
        };
        let x = 0.9;
        let xs = vec![T64::from_vec(&[1], vec![x]).unwrap()];
        let h = gru.estimate_sequence(&xs).unwrap().at(0);

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        // h0 = 0, so the U terms and r's effect on the candidate vanish.
        let z = sigmoid(0.5 * x + 0.1);
        let n = (0.7f64 * x - 0.2).tanh();
        let expect = z * n;
        assert!((h - expect).abs() < 1e-12, "{h} vs {expect}");
    }

    #[test]
    fn history_order_matters() {
        let mut rng = Rng::seed_from(17);
        let cfg = GruConfig {
            input_dim: 2,
            hidden_dim: 4,
        };
        let mut sensitive = 0;
        for seed in 0..100 {
            let mut r = rng.split(seed);
            let gru = GruEstimator::init(cfg, &mut r);
            let a = T64::from_vec(&[2], vec![0.8, -0.3]).unwrap();
            let b = T64::from_vec(&[2], vec![-0.5, 0.9]).unwrap();
            let h_ab = gru.estimate_sequence(&[a.clone(), b.clone()]).unwrap();
            let h_ba = gru.estimate_sequence(&[b, a]).unwrap();
            let diff: f64 = h_ab
                .as_slice()
                .iter()
                .zip(h_ba.as_slice())
                .map(|(x, y)| (x - y).abs())
                .sum();
            if diff > 1e-9 {
                sensitive += 1;
            }
        }
        assert_eq!(sensitive, 100, "GRU must be order-sensitive");
    }

    fn tiny_film(gate: GateMode) -> FilmModulator {
        let mut rng = Rng::seed_from(23);
        FilmModulator::init(
            FilmConfig {
                tokens: 2,
                channels: 2,
                hidden: 3,
                gate,
            },
            &mut rng,
        )
    }

    #[test]
    fn modulation_identity_at_safe_start() {
        // Zero-init γ/β heads with the gate off: exact identity.
        let film = tiny_film(GateMode::Off);
        let z = T64::from_vec(&[2, 2], vec![0.4, -1.2, 2.0, 0.7]).unwrap();
        let h = T64::from_vec(&[3], vec![0.3, -0.8, 0.5]).unwrap();
        let out = film.modulate(&z, &h).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn film_hand_example() {
        // z_sem=[2,4], g=[0.5,0.5], γ=[1,0], β=[1,−1] → [3, 1]
        let z = T64::from_vec(&[1, 2], vec![2.0, 4.0]).unwrap();
        let g = T64::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        let gamma = T64::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let beta = T64::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let zg = z.mul(&g).unwrap();
        let scaled = zg.mul(&gamma.offset(1.0)).unwrap();
        let out = scaled.add(&beta).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn gamma_minus_one_suppresses_intent() {
        // (1 + γ) with γ = −1 kills z_sem; output is exactly β.
        let mut film = tiny_film(GateMode::Off);
        film.b_gamma = T64::filled(&[2], -1.0);
        film.b_beta = T64::from_vec(&[2], vec![0.25, -0.5]).unwrap();
        let z = T64::from_vec(&[2, 2], vec![3.0, -2.0, 10.0, 4.0]).unwrap();
        let h = T64::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let out = film.modulate(&z, &h).unwrap();
        assert_eq!(out.as_slice(), &[0.25, -0.5, 0.25, -0.5]);
    }

    #[test]
    fn gate_stays_in_unit_interval() {
        // Sigmoid output; strictly open on any input that does not saturate
        // the f64 exponent.
        let film = tiny_film(GateMode::PerChannel);
        for k in 0..50 {
            let h = T64::from_fn(&[3], |i| ((k * 3 + i) as f64 - 70.0) * 0.2);
            let g = film.gate_values(&h).unwrap();
            assert!(g.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    fn tiny_cerebellum(seed: u64) -> Cerebellum {
        let mut rng = Rng::seed_from(seed);
        Cerebellum::init(
            GruConfig {
                input_dim: 19,
                hidden_dim: 6,
            },
            FilmConfig {
                tokens: 2,
                channels: 3,
                hidden: 6,
                gate: GateMode::PerChannel,
            },
            StateScale::default(),
            &mut rng,
        )
    }

    #[test]
    fn refine_k1_equals_plain_modulate() {
        let cereb = tiny_cerebellum(31);
        let hist = warm_history(4, &StateVector::zeros(6));
        let z = T64::from_fn(&[2, 3], |i| 0.2 * i as f64 - 0.3);
        let h = cereb.gru.estimate(&hist, &cereb.state_scale).unwrap();
        let direct = cereb.film.modulate(&z, &h).unwrap();
        let refined = cereb.refine(&z, &hist, 1).unwrap();
        assert_eq!(direct, refined);
    }

    #[test]
    fn refine_zero_cycles_is_contract_error() {
        let cereb = tiny_cerebellum(37);
        let hist = warm_history(4, &StateVector::zeros(6));
        let z = T64::zeros(&[2, 3]);
        assert!(matches!(
            cereb.refine(&z, &hist, 0),
            Err(CerebellarError::ZeroCycles)
        ));
    }

    #[test]
    fn refine_two_cycles_differs_with_nonzero_forward_model() {
        let mut differs = 0;
        for seed in 0..20 {
            let mut cereb = tiny_cerebellum(100 + seed);
            // Give the forward model and heads some signal.
            let mut rng = Rng::seed_from(999 + seed);
            cereb.forward_model.b = T64::from_fn(&[19], |_| rng.normal_scaled(0.5));
            cereb.film.w_gamma = T64::from_fn(&[3, 6], |_| rng.normal_scaled(0.5));
            let mut sv = StateVector::zeros(6);
            sv.joint_angles[0] = 0.4;
            let hist = warm_history(4, &sv);
            let z = T64::from_fn(&[2, 3], |i| 0.1 * (i as f64 + 1.0));
            let k1 = cereb.refine(&z, &hist, 1).unwrap();
            let k2 = cereb.refine(&z, &hist, 2).unwrap();
            if k1 != k2 {
                differs += 1;
            }
        }
        assert!(differs >= 18, "refinement should usually change the latent");
    }

    #[test]
    fn refine_with_zero_forward_model_and_zero_history_is_fixed_point() {
        let mut cereb = tiny_cerebellum(41);
        // Zero forward model and zero-bias heads: the predicted state equals
        // the (zero) history, so a second cycle changes nothing.
        cereb.forward_model.w = T64::zeros(&[19, 6 + 6]);
        cereb.forward_model.b = T64::zeros(&[19]);
        let hist = warm_history(4, &StateVector::zeros(6));
        let z = T64::from_fn(&[2, 3], |i| 0.3 * i as f64);
        let k1 = cereb.refine(&z, &hist, 1).unwrap();
        let k2 = cereb.refine(&z, &hist, 2).unwrap();
        assert_eq!(k1, k2);
    }

    fn push_wrench_series(hist: &mut StateHistory, fx: &[f64]) {
        for &f in fx {
            hist.push_wrench([f, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn constant_wrench_never_triggers() {
        let mut hist = StateHistory::new(4, 64);
        push_wrench_series(&mut hist, &vec![0.5; 40]);
        assert!(reflex_check(&hist, &ReflexConfig::default()).is_none());
    }

    #[test]
    fn contact_spike_triggers_withdrawal() {
        // Quiet Fx, then a −37.02 N reaction spike (an obstacle on the +x
        // side pushing back): withdraw along the reaction, away from it.
        let mut hist = StateHistory::new(4, 64);
        push_wrench_series(&mut hist, &vec![0.0; 30]);
        hist.push_wrench([-37.02, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = ReflexConfig::default();
        let reflex = reflex_check(&hist, &cfg).expect("spike must trigger");
        assert!(reflex.command.deltas[0] < 0.0);
        assert!((reflex.command.deltas[0] + cfg.retraction_gain).abs() < 1e-12);
        assert_eq!(reflex.command.deltas[1], 0.0);
        assert_eq!(reflex.command.gripper, 0.0);
        assert_eq!(reflex.hold_ticks, cfg.retraction_ticks);
    }

    #[test]
    fn threshold_arithmetic() {
        // k=4, σ=1, floor=0.5: threshold 4.5. Jump 3.9 quiet, 4.6 triggers.
        // A ±1 alternating baseline has mean 0 and std exactly 1.
        let cfg = ReflexConfig {
            force_window: 20,
            zscore_k: 4.0,
            floor: 0.5,
            retraction_gain: 0.01,
            retraction_ticks: 5,
        };
        let base: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();

        let mut quiet = StateHistory::new(4, 64);
        push_wrench_series(&mut quiet, &base);
        quiet.push_wrench([3.9, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(reflex_check(&quiet, &cfg).is_none());

        let mut loud = StateHistory::new(4, 64);
        push_wrench_series(&mut loud, &base);
        loud.push_wrench([4.6, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(reflex_check(&loud, &cfg).is_some());
    }

    #[test]
    fn reflex_needs_enough_samples() {
        let mut hist = StateHistory::new(4, 64);
        push_wrench_series(&mut hist, &[0.0; 5]);
        hist.push_wrench([100.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(reflex_check(&hist, &ReflexConfig::default()).is_none());
    }
}
