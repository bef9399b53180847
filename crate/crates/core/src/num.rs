//! Scalar abstraction for the numeric kernels.
//!
//! Tensor, tape, and neuron dynamics are generic over [`Real`] so the same
//! kernels run in f32 or f64. Everything above the kernels (networks, plant,
//! trainer) uses the f64 aliases exported from the crate root: gradient
//! checking against central finite differences needs the f64 headroom.

use num_traits::Float;

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// Convert an `f64` literal into this scalar type.
    #[inline]
    fn of(v: f64) -> Self {
        num_traits::NumCast::from(v).expect("literal representable in scalar type")
    }

    /// Widen to `f64` for reporting and serialization.
    #[inline]
    fn widen(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
