use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size for {what}: got {got}, need at least {min}")]
    InvalidSize {
        what: &'static str,
        got: usize,
        min: usize,
    },

    #[error("no {degree}-regular graph on {nodes} nodes: node count times degree must be even")]
    Parity { nodes: usize, degree: usize },

    #[error("graph construction failed after {attempts} attempts: {reason}")]
    ConstructionFailed { attempts: usize, reason: String },

    #[error("graph is not connected")]
    Disconnected,

    #[error("step size eps={eps} too large: eigenvalue {eigenvalue} violates the consensus contract")]
    StepSize { eps: f64, eigenvalue: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("{what} of size {size} exceeds the limit {limit}")]
    SizeLimit {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("consensus did not converge after {iterations} iterations (last error {last_error:e})")]
    NonConvergence { iterations: usize, last_error: f64 },

    #[error("{stage} {index} failed: {source}")]
    Stage {
        stage: &'static str,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Lagrange interpolation over {points} points produced a non-finite value")]
    NumericOverflow { points: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no finite chunk count reaches the target: {0}")]
    NoFiniteChunks(String),

    #[error("precision matrix of component {component} is singular")]
    SingularPrecision { component: usize },

    #[error("component {component} is empty (N_k = {weight:e})")]
    EmptyComponent { component: usize, weight: f64 },

    #[error("graphical lasso did not converge after {sweeps} sweeps (KKT residual {residual:e})")]
    GlassoNonConvergence { sweeps: usize, residual: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("eigen-decomposition did not converge")]
    EigenNonConvergence,

    #[error("EM stalled at round {round}: objective fell from {previous} to {current}")]
    Stall {
        round: usize,
        previous: f64,
        current: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at(self, stage: &'static str, index: usize) -> Self {
        Error::Stage {
            stage,
            index,
            source: Box::new(self),
        }
    }

    /// Walks through `Stage` wrappers to the underlying failure.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the root cause is an iteration budget running out.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::NonConvergence { .. }
                | Error::GlassoNonConvergence { .. }
                | Error::EigenNonConvergence
        )
    }
}
