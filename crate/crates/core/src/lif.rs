//! Stateful leaky integrate-and-fire layers.
//!
//! Membrane update per simulation step:
//!
//! `u[τ] = β·u[τ−1] + I[τ] − s[τ−1]·ϑ`
//!
//! with a spike emitted when `u[τ] ≥ ϑ` (inclusive, so threshold-equality
//! drive behaves deterministically). The subtraction term applies the soft
//! reset one step after the spike, exactly as the update is written; an
//! immediate-soft variant is exposed for comparison. State is preserved
//! across control steps — a layer is never re-initialized unless an episode
//! boundary calls for it.

use crate::num::Real;
use crate::tensor::{Tensor, TensorError, TensorResult};
use serde::{Deserialize, Serialize};

/// When the `−s·ϑ` subtraction lands relative to the spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Subtract the previous step's spike, literally as the update reads.
    #[default]
    DelayedSoft,
    /// Subtract at spike time.
    ImmediateSoft,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LifConfig<S> {
    /// Membrane decay factor β ∈ (0, 1).
    pub beta: S,
    /// Firing threshold ϑ > 0; also the soft-reset magnitude.
    pub theta: S,
    /// Simulation timesteps folded per control step.
    pub window: usize,
    pub reset_mode: ResetMode,
    /// Slope of the fast-sigmoid surrogate used in the backward pass.
    pub surrogate_scale: S,
}

impl Default for LifConfig<f64> {
    fn default() -> Self {
        LifConfig {
            beta: 0.9,
            theta: 1.0,
            window: 4,
            reset_mode: ResetMode::DelayedSoft,
            surrogate_scale: 1.0,
        }
    }
}

impl<S: Real> LifConfig<S> {
    pub fn validate(&self) -> TensorResult<()> {
        if !(self.beta > S::zero() && self.beta < S::one()) {
            return Err(TensorError::Contract {
                op: "lif_config",
                msg: format!("beta must be in (0,1), got {}", self.beta),
            });
        }
        if self.theta <= S::zero() {
            return Err(TensorError::Contract {
                op: "lif_config",
                msg: format!("theta must be positive, got {}", self.theta),
            });
        }
        if self.window == 0 {
            return Err(TensorError::Contract {
                op: "lif_config",
                msg: "window must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Membrane potentials and previous-step spikes of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneState<S> {
    pub u: Tensor<S>,
    pub s_prev: Tensor<S>,
}

/// Binary spike activity over a simulation window, `[T, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTensor<S> {
    pub spikes: Tensor<S>,
}

impl<S: Real> SpikeTensor<S> {
    pub fn window(&self) -> usize {
        self.spikes.rows()
    }

    pub fn neurons(&self) -> usize {
        self.spikes.cols()
    }

    /// Per-neuron firing rate over the window, in [0, 1].
    pub fn rates(&self) -> Tensor<S> {
        let t = S::of(self.window() as f64);
        self.spikes.sum_rows().map(|v| v / t)
    }

    /// Per-neuron mask: fired at least once in the window.
    pub fn any_spike(&self) -> Vec<bool> {
        self.rates().as_slice().iter().map(|&r| r > S::zero()).collect()
    }
}

/// Zeroed state for `n` neurons; episode boundaries start here.
pub fn reset_state<S: Real>(n: usize) -> TensorResult<MembraneState<S>> {
    if n == 0 {
        return Err(TensorError::Contract {
            op: "reset_state",
            msg: "layer must have at least one neuron".into(),
        });
    }
    Ok(MembraneState {
        u: Tensor::zeros(&[n]),
        s_prev: Tensor::zeros(&[n]),
    })
}

/// One membrane update. `input_current` is the already-weighted synaptic sum.
pub fn lif_step<S: Real>(
    state: &MembraneState<S>,
    input_current: &Tensor<S>,
    cfg: &LifConfig<S>,
) -> TensorResult<(Tensor<S>, MembraneState<S>)> {
    let n = state.u.len();
    if input_current.len() != n || state.s_prev.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "lif_step",
            lhs: state.u.shape().to_vec(),
            rhs: input_current.shape().to_vec(),
        });
    }
    let mut u_next = Tensor::zeros(&[n]);
    let mut spikes = Tensor::zeros(&[n]);
    match cfg.reset_mode {
        ResetMode::DelayedSoft => {
            for i in 0..n {
                let u = cfg.beta * state.u.at(i) + input_current.at(i)
                    - state.s_prev.at(i) * cfg.theta;
                let s = if u >= cfg.theta { S::one() } else { S::zero() };
                u_next.set(i, u);
                spikes.set(i, s);
            }
        }
        ResetMode::ImmediateSoft => {
            for i in 0..n {
                let pre = cfg.beta * state.u.at(i) + input_current.at(i);
                let s = if pre >= cfg.theta { S::one() } else { S::zero() };
                u_next.set(i, pre - s * cfg.theta);
                spikes.set(i, s);
            }
        }
    }
    if !u_next.all_finite() {
        return Err(TensorError::NonFinite { op: "lif_step" });
    }
    Ok((
        spikes.clone(),
        MembraneState {
            u: u_next,
            s_prev: spikes,
        },
    ))
}

/// Fold [`lif_step`] over a `[T, n]` current matrix. The returned state
/// carries membrane and spike history into the next control step.
pub fn lif_window<S: Real>(
    state: &MembraneState<S>,
    currents: &Tensor<S>,
    cfg: &LifConfig<S>,
) -> TensorResult<(SpikeTensor<S>, MembraneState<S>)> {
    let n = state.u.len();
    let t = cfg.window;
    if currents.rows() != t || currents.cols() != n {
        return Err(TensorError::ShapeMismatch {
            op: "lif_window",
            lhs: vec![t, n],
            rhs: currents.shape().to_vec(),
        });
    }
    let mut spikes = Tensor::zeros(&[t, n]);
    let mut st = state.clone();
    for tau in 0..t {
        let row = Tensor::from_vec(&[n], currents.row(tau).to_vec())?;
        let (s, next) = lif_step(&st, &row, cfg)?;
        for i in 0..n {
            spikes.set2(tau, i, s.at(i));
        }
        st = next;
    }
    Ok((SpikeTensor { spikes }, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    type S = f64;

    fn cfg(beta: f64, theta: f64, window: usize) -> LifConfig<S> {
        LifConfig {
            beta,
            theta,
            window,
            reset_mode: ResetMode::DelayedSoft,
            surrogate_scale: 1.0,
        }
    }

    /// Independent scalar reference: one neuron, plain loop over f64s.
    /// Deliberately written without the Tensor machinery.
    fn scalar_reference(
        beta: f64,
        theta: f64,
        currents: &[f64],
        mode: ResetMode,
    ) -> (Vec<f64>, f64, f64) {
        let mut u = 0.0f64;
        let mut s_prev = 0.0f64;
        let mut spikes = Vec::with_capacity(currents.len());
        for &i_t in currents {
            match mode {
                ResetMode::DelayedSoft => {
                    u = beta * u + i_t - s_prev * theta;
                    s_prev = if u >= theta { 1.0 } else { 0.0 };
                }
                ResetMode::ImmediateSoft => {
                    let pre = beta * u + i_t;
                    s_prev = if pre >= theta { 1.0 } else { 0.0 };
                    u = pre - s_prev * theta;
                }
            }
            spikes.push(s_prev);
        }
        (spikes, u, s_prev)
    }

    #[test]
    fn quiescence_at_zero() {
        let c = cfg(0.7, 1.0, 1);
        let st = reset_state::<S>(3).unwrap();
        let (s, next) = lif_step(&st, &Tensor::zeros(&[3]), &c).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(next.u.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_drive_sequence_hand_values() {
        // β=0.5, ϑ=1.0, input 0.6: u walks 0.6, 0.9, 1.05 (spike), 0.125.
        let c = cfg(0.5, 1.0, 1);
        let mut st = reset_state::<S>(1).unwrap();
        let drive = Tensor::from_vec(&[1], vec![0.6]).unwrap();
        let expected_u = [0.6, 0.9, 1.05, 0.5 * 1.05 + 0.6 - 1.0];
        let expected_s = [0.0, 0.0, 1.0, 0.0];
        for k in 0..4 {
            let (s, next) = lif_step(&st, &drive, &c).unwrap();
            assert!((next.u.at(0) - expected_u[k]).abs() < 1e-15, "step {k}");
            assert_eq!(s.at(0), expected_s[k], "step {k}");
            st = next;
        }
    }

    #[test]
    fn threshold_equality_spikes() {
        // β=0.9, input = ϑ = 1.0 from rest: u hits exactly 1.0 and fires.
        let c = cfg(0.9, 1.0, 1);
        let st = reset_state::<S>(1).unwrap();
        let (s, next) = lif_step(&st, &Tensor::from_vec(&[1], vec![1.0]).unwrap(), &c).unwrap();
        assert_eq!(next.u.at(0), 1.0);
        assert_eq!(s.at(0), 1.0);
    }

    #[test]
    fn reset_state_contract() {
        let st = reset_state::<S>(3).unwrap();
        assert_eq!(st.u.as_slice(), &[0.0; 3]);
        assert_eq!(st.s_prev.as_slice(), &[0.0; 3]);
        assert!(reset_state::<S>(0).is_err());
    }

    #[test]
    fn zero_window_input_is_fixed_point() {
        let c = cfg(0.8, 1.0, 5);
        let st = reset_state::<S>(4).unwrap();
        let (spk, next) = lif_window(&st, &Tensor::zeros(&[5, 4]), &c).unwrap();
        assert!(spk.spikes.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(next, st);
    }

    #[test]
    fn window_concatenation_is_exact() {
        // One T=4 window equals two chained T=2 windows, bit for bit.
        let mut rng = Rng::seed_from(9);
        let currents: Vec<f64> = (0..4 * 3).map(|_| rng.uniform_in(-0.5, 1.2)).collect();
        let full = Tensor::from_vec(&[4, 3], currents.clone()).unwrap();
        let st0 = reset_state::<S>(3).unwrap();

        let (spk_full, end_full) = lif_window(&st0, &full, &cfg(0.85, 1.0, 4)).unwrap();

        let half_cfg = cfg(0.85, 1.0, 2);
        let first = Tensor::from_vec(&[2, 3], currents[..6].to_vec()).unwrap();
        let second = Tensor::from_vec(&[2, 3], currents[6..].to_vec()).unwrap();
        let (spk_a, mid) = lif_window(&st0, &first, &half_cfg).unwrap();
        let (spk_b, end_chained) = lif_window(&mid, &second, &half_cfg).unwrap();

        assert_eq!(end_full, end_chained);
        let mut chained = spk_a.spikes.as_slice().to_vec();
        chained.extend_from_slice(spk_b.spikes.as_slice());
        assert_eq!(spk_full.spikes.as_slice(), chained.as_slice());
    }

    #[test]
    fn matches_scalar_reference_on_random_sequences() {
        // Exact (bit-identical) agreement with the independent scalar loop.
        let mut rng = Rng::seed_from(1234);
        for case in 0..500 {
            let beta = rng.uniform_in(0.05, 0.99);
            let theta = rng.uniform_in(0.2, 2.0);
            let steps = 1 + rng.index(30);
            let currents: Vec<f64> = (0..steps).map(|_| rng.uniform_in(-1.0, 2.0)).collect();
            let mode = if rng.chance(0.5) {
                ResetMode::DelayedSoft
            } else {
                ResetMode::ImmediateSoft
            };
            let (ref_spikes, ref_u, ref_sp) = scalar_reference(beta, theta, &currents, mode);

            let c = LifConfig {
                beta,
                theta,
                window: steps,
                reset_mode: mode,
                surrogate_scale: 1.0,
            };
            let mat = Tensor::from_vec(&[steps, 1], currents.clone()).unwrap();
            let (spk, end) = lif_window(&reset_state::<S>(1).unwrap(), &mat, &c).unwrap();
            for (tau, &expect) in ref_spikes.iter().enumerate() {
                assert_eq!(spk.spikes.at2(tau, 0), expect, "case {case} tau {tau}");
            }
            assert_eq!(end.u.at(0), ref_u, "case {case}");
            assert_eq!(end.s_prev.at(0), ref_sp, "case {case}");
        }
    }

    #[test]
    fn subthreshold_decay_is_monotone_and_silent() {
        let c = cfg(0.9, 1.0, 1);
        let mut st = MembraneState {
            u: Tensor::from_vec(&[1], vec![0.95]).unwrap(),
            s_prev: Tensor::zeros(&[1]),
        };
        let zero = Tensor::zeros(&[1]);
        let mut last = st.u.at(0);
        for _ in 0..50 {
            let (s, next) = lif_step(&st, &zero, &c).unwrap();
            assert_eq!(s.at(0), 0.0);
            assert!(next.u.at(0) <= last);
            assert!(next.u.at(0) >= 0.0);
            last = next.u.at(0);
            st = next;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn firing_rate_under_constant_drive_matches_reference() {
        // Long-run firing rate against the scalar loop, supra-threshold drive.
        let beta = 0.9;
        let theta = 1.0;
        let steps = 2000;
        let currents = vec![0.4; steps];
        let (ref_spikes, _, _) =
            scalar_reference(beta, theta, &currents, ResetMode::DelayedSoft);
        let ref_rate = ref_spikes.iter().sum::<f64>() / steps as f64;

        let c = LifConfig {
            beta,
            theta,
            window: steps,
            reset_mode: ResetMode::DelayedSoft,
            surrogate_scale: 1.0,
        };
        let mat = Tensor::from_vec(&[steps, 1], currents).unwrap();
        let (spk, _) = lif_window(&reset_state::<S>(1).unwrap(), &mat, &c).unwrap();
        let rate = spk.spikes.sum() / steps as f64;
        assert_eq!(rate, ref_rate);
        assert!(rate > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.5, 1.0, 4).validate().is_ok());
        assert!(cfg(1.0, 1.0, 4).validate().is_err());
        assert!(cfg(0.5, 0.0, 4).validate().is_err());
        assert!(cfg(0.5, 1.0, 0).validate().is_err());
    }
}
