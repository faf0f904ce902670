//! Error types shared across the solver.

use thiserror::Error;

/// Errors produced by grid construction, propagation, assembly and the
/// variation-time driver.
#[derive(Debug, Error)]
pub enum VemError {
    #[error("grid too small: need at least 3 nodes, got {0}")]
    GridTooSmall(usize),

    #[error("bad horizon: tf ({tf}) must be greater than t0 ({t0})")]
    BadHorizon { t0: f64, tf: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeError {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite evaluation in {context}{}", node.map(|i| format!(" at node {i}")).unwrap_or_default())]
    NonFiniteEvaluation {
        context: &'static str,
        node: Option<usize>,
    },

    #[error("node index {index} out of range (N = {len})")]
    IndexError { index: usize, len: usize },

    #[error("ill-conditioned state transition: condition estimate {cond:.3e} exceeds 1e8")]
    IllConditionedTransition { cond: f64 },

    #[error("operation not defined for terminal mode {0}")]
    ModeError(&'static str),

    #[error("singular Hessian in Newton flow")]
    SingularHessian,

    #[error("no cycloid root in (0, 2*pi) for the requested endpoint")]
    NoCycloid,

    #[error("variation-time step underflow (h = {h:.3e} at tau = {tau:.6}); try smaller gains")]
    StiffnessFailure { tau: f64, h: f64 },

    #[error("divergence at tau = {tau:.6}; last good state retained")]
    Divergence { tau: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl VemError {
    pub fn non_finite(context: &'static str) -> Self {
        VemError::NonFiniteEvaluation {
            context,
            node: None,
        }
    }

    pub fn non_finite_at(context: &'static str, node: usize) -> Self {
        VemError::NonFiniteEvaluation {
            context,
            node: Some(node),
        }
    }
}

pub type Result<T> = std::result::Result<T, VemError>;
