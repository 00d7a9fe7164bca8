//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The crate provides the numeric substrate for the radar model toolkit:
//! a row-major [`Tensor`] value type, a linear [`Tape`] recording forward
//! operations with their backward rules, the ADADELTA optimizer, and a
//! binary checkpoint format for named parameter sets.
//!
//! Tensors are immutable-after-forward values and safe to share across
//! threads; a tape and its optimizer state belong to a single training run.
//! All reductions use fixed summation orders, so a seed fully determines a
//! training trajectory.

mod conv;
mod error;
mod scalar;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use error::{CheckpointError, TensorError};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
