//! Error type shared by all modules.
//!
//! Variants are grouped by how a front end should react: configuration and
//! usage problems, numerical failures (CFL rejection, CG breakdown,
//! non-finite values), and data/file problems.

use thiserror::Error;

/// Crate-wide error.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or grid mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// API misuse: mixing tapes, missing history, bad argument ranges.
    #[error("invalid usage: {0}")]
    Usage(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Time step rejected by the CFL guard. Carries the measured Courant
    /// number and the limit it exceeded; `step` is 1-based when known.
    #[error("CFL violation{}: courant {courant:.6} exceeds cfl_max {limit:.6}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    CflExceeded {
        courant: f64,
        limit: f64,
        step: Option<usize>,
    },

    /// Conjugate-gradient breakdown (non-positive curvature or stagnation).
    #[error("CG breakdown{}: {reason}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    CgBreakdown { reason: String, step: Option<usize> },

    /// A non-finite value appeared where finite math was required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Dataset-level problem (degenerate sample, missing file entry, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed or corrupt file contents (bad magic, checksum, version).
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attaches a 1-based time-step index to CFL/CG errors, leaving other
    /// variants untouched.
    pub fn with_step(self, step_1based: usize) -> Self {
        match self {
            Error::CflExceeded { courant, limit, .. } => Error::CflExceeded {
                courant,
                limit,
                step: Some(step_1based),
            },
            Error::CgBreakdown { reason, .. } => Error::CgBreakdown {
                reason,
                step: Some(step_1based),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cfl_message_carries_courant_and_step() {
        let e = Error::CflExceeded {
            courant: 0.75,
            limit: 0.5,
            step: None,
        }
        .with_step(12);
        let msg = e.to_string();
        assert!(msg.contains("0.75"), "{msg}");
        assert!(msg.contains("step 12"), "{msg}");
    }

    #[test]
    fn with_step_leaves_other_variants_alone() {
        let e = Error::Usage("x".into()).with_step(3);
        assert!(matches!(e, Error::Usage(_)));
    }
}
