use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite matrix entry: {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not positive semidefinite: {0}")]
    NotPositiveSemidefinite(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: String, iterations: usize },

    #[error("stability indicators disagree (Gelfand estimate {estimate}, Lyapunov series converged: {series_converged})")]
    Inconclusive { estimate: f64, series_converged: bool },

    #[error("no dissipativity certificate found: {reason} (best margin {best_margin:e})")]
    CertificateNotFound { reason: String, best_margin: f64 },

    #[error("turnpike bound violated: {0}")]
    BoundViolated(String),

    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),

    #[error("at least {required} paths are needed, got {got}")]
    TooFewPaths { required: usize, got: usize },

    #[error("perturbation is zero in mean square at every step")]
    DegeneratePerturbation,

    #[error("invalid input: {0}")]
    InvalidInput(String),
}
