use thiserror::Error;

/// Errors raised by the numerical pipelines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("direction is not a unit vector (|omega| = {norm})")]
    NotUnit { norm: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("{what} did not converge; residual history {history:?}")]
    NoConvergence {
        what: &'static str,
        history: Vec<f64>,
    },

    #[error("fixed-point map is not contracting; successive-difference ratios {ratios:?}")]
    NonContraction { ratios: Vec<f64> },

    #[error(
        "constitutive Newton iteration diverged (residuals {residuals:?}); \
         reduce the field amplitude or h"
    )]
    NewtonDivergence { residuals: Vec<f64> },

    #[error("CFL condition violated: dt = {dt} exceeds the limit {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("non-finite value at step {step} (t = {t}, node {node})")]
    NonFinite { step: usize, t: f64, node: usize },

    #[error("mode index 0 requested; zero harmonics are handled by solve_zero_harmonic")]
    ZeroMode,

    #[error("mode index {mode} outside the admissible range [-{bound}, {bound}]")]
    ModeOutOfRange { mode: i32, bound: i32 },

    #[error("window misses envelope (normalization integral {integral:e})")]
    WindowMissesEnvelope { integral: f64 },

    #[error("insufficient detector resolution: neighbour jump {jump} rad after unwrapping")]
    InsufficientResolution { jump: f64 },

    #[error("e0 = 0: no retardation signal")]
    NoRetardationSignal,

    #[error("insufficient angular coverage: {count} angles (need at least 8)")]
    InsufficientAngles { count: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
