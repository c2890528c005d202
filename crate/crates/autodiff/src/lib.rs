//! Reverse-mode automatic differentiation over 64-bit float tensors.
//!
//! The engine records every primitive application on a [`Tape`] and replays
//! the records in reverse to accumulate gradients. The primitive set is
//! deliberately small: dense linear algebra, the usual pointwise
//! nonlinearities, stabilized softmax variants, causal dilated convolution,
//! prefix pooling, masked dropout, and three edge-list primitives for
//! neighborhood attention. [`adam`] provides the optimizer and [`gradcheck`]
//! the finite-difference verification harness; [`container`] reads and
//! writes the `LFNET1` parameter file format.

pub mod adam;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use tape::{EdgeIndex, Tape, Var};
pub use tensor::Tensor;
