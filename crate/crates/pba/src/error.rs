use thiserror::Error;

/// Errors surfaced by graph construction, geometry, and the solvers.
#[derive(Debug, Clone, Error)]
pub enum PbaError {
    /// A plane passes through (or numerically at) the coordinate origin and
    /// cannot be represented as a closest-point vector.
    #[error("degenerate plane: {0}")]
    DegeneratePlane(String),

    /// A point set is too thin (collinear or coincident) to support a plane fit.
    #[error("degenerate plane fit: {0}")]
    DegenerateFit(String),

    /// The damped pose system was not positive definite at the current lambda.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// The cost became non-finite, which signals corrupt input data.
    #[error("cost diverged to a non-finite value at iteration {iteration}")]
    DivergedNaN { iteration: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    /// The synthetic generator produced a pose that is underconstrained by
    /// the planes it can see.
    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("invalid problem graph: {0}")]
    InvalidGraph(String),
}
