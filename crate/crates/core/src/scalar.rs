//! Scalar abstraction so the numeric core works over `f32` or `f64`.
//!
//! Concrete type aliases at the crate root pin `f64` for the training
//! engine and file formats.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};
use rand::Rng;
use serde::{de::DeserializeOwned, Serialize};

pub trait Real:
    Float
    + NumAssignOps
    + FromPrimitive
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// One draw from the standard normal distribution.
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw from `[0, 1)`.
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
}

macro_rules! impl_real {
    ($($t:ty)*) => ($(
        impl Real for $t {
            fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.sample::<$t, _>(rand_distr::StandardNormal)
            }

            fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.gen::<$t>()
            }
        }
    )*)
}

impl_real!(f32 f64);

/// Numerically stable `log(sigmoid(x)) = -softplus(-x)`.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    -softplus(-x)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
