//! Minimal per-sample neural network engine.
//!
//! Activations are `[C, H, W]` arrays for a single sample. Batches are
//! processed sample by sample, so no statistic ever crosses batch elements.
//! Every op has a hand-written backward pass; the engine is generic over
//! [`Real`] so that gradients can be checked in `f64` while training runs in
//! `f32`.

mod ops;
mod params;

pub use ops::{sigmoid, Op, Seq, Trace};
pub use params::{Grads, Param, ParamSet};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating point scalar usable by the engine.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite real")
    }
}

impl Real for f32 {}
impl Real for f64 {}
