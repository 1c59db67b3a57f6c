//! Reverse-mode automatic differentiation over grid fields.
//!
//! The tape records the exact forward kernels used by the plain solver, so
//! a traced integration reproduces the untraced one bit for bit while
//! supporting a reverse pass through every step, the truncated CG inversion
//! included. See [`tape::Tape`] for the op set and [`gradcheck::grad_check`]
//! for finite-difference verification.

mod adjoints;
pub mod gradcheck;
pub mod params;
pub mod stack;
pub mod tape;

pub use gradcheck::{
    grad_check, grad_check_indices, GradCheckEntry, GradCheckReport, DEFAULT_FD_EPS,
    DEFAULT_GRADCHECK_TOL,
};
pub use params::{ParamEntry, ParamId, ParamStore, Tensor};
pub use stack::{BnStats, ChannelStack};
pub use tape::{GradValue, NodeId, Tape, TracedField, TracedScalar, TracedStack, TracedTensor};
