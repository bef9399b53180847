// Index loops over parallel arrays read better than zipped iterators in the
// numeric kernels; keep them.
#![allow(clippy::needless_range_loop)]

//! Hierarchical neuromorphic control stack.
//!
//! Three control tiers — an intent bottleneck, a recurrent proprioceptive
//! modulator, and a stateful spiking decoder — plus the plant simulator,
//! behavior-cloning trainer, and cycle-level processor model used to
//! exercise them. Numeric kernels (tensor, tape, neuron dynamics) are
//! generic over the scalar type; everything is instantiated at `f64`
//! through the aliases below.

pub mod action;
pub mod autodiff;
pub mod cerebellar;
pub mod checkpoint;
pub mod cortical;
pub mod csvio;
pub mod lif;
pub mod num;
pub mod plant;
pub mod rng;
pub mod runner;
pub mod spinal;
pub mod stack;
pub mod systolic;
pub mod trainer;
pub mod tensor;

pub use num::Real;

/// Default-scalar aliases. Training and evaluation run in f64 so analytic
/// gradients can be checked against central finite differences.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type LifConfig64 = lif::LifConfig<f64>;
pub type MembraneState64 = lif::MembraneState<f64>;
pub type SpikeTensor64 = lif::SpikeTensor<f64>;
