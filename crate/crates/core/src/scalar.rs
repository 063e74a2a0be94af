//! Floating point element types the engine can run on.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};

/// Element type of a [`Tensor`](crate::Tensor): `f32` for inference, `f64`
/// where headroom matters more than speed (for example receptive-field
/// sweeps, whose activations are path counts).
pub trait Scalar: Float + FromPrimitive + NumCast + Default + Debug + Display + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
