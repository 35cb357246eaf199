use thiserror::Error;

use crate::qp::QpError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Pitch is too close to the Euler-rate singularity at ±90°.
    #[error("state too close to the Euler-rate singularity: |cos(pitch)| = {cos_pitch:.4} <= {threshold:.4}")]
    NearSingularity { cos_pitch: f64, threshold: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("MPC problem infeasible: most violated constraint is {constraint} (violation {violation:.3e})")]
    Infeasible { constraint: String, violation: f64 },

    #[error("QP solver hit the iteration limit after {iterations} iterations")]
    IterationLimit { iterations: usize },

    #[error("contract violation: {0}")]
    Contract(&'static str),

    #[error("inverse kinematics did not converge: residual {residual:.3e} m")]
    Unreachable { residual: f64 },

    #[error(transparent)]
    Qp(#[from] QpError),

    #[error("scenario parse error: {0}")]
    Parse(String),
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidConfig(msg.into()))
}
