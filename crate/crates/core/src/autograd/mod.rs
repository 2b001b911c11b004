//! Reverse-mode automatic differentiation: kernels, the recording tape, and
//! finite-difference validation.

pub mod gradcheck;
pub mod ops;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{Grads, Phase, Tape, Tid};
