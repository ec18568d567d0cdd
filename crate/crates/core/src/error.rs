use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Variants carry enough context to be
/// printed directly by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("frequency is not strictly positive: omega({t}) = {omega}")]
    NonPositiveFrequency { t: f64, omega: f64 },
    #[error("evaluation at {value} outside of domain [{lo}, {hi}]")]
    DomainExceeded { value: f64, lo: f64, hi: f64 },
    #[error("pseudo-period window at t = {t} leaves the domain (t_min = {t_min})")]
    InsufficientHistory { t: f64, t_min: f64 },
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("quadrature did not converge (last change {change:e})")]
    QuadratureFailure { change: f64 },
    #[error("trajectory grid too coarse: derivative error estimate {estimate:e} exceeds {tolerance:e}")]
    GridTooCoarse { estimate: f64, tolerance: f64 },
    #[error("symbol band {band} exceeds 2N = {limit}")]
    BandExceedsTruncation { band: usize, limit: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("frequency operator is singular (condition number {condition:e})")]
    SingularFrequencyOperator { condition: f64 },
    #[error("matrix is not Hermitian (asymmetry {asymmetry:e})")]
    NotHermitian { asymmetry: f64 },
    #[error("SDP solver failed: {0}")]
    SolverFailure(String),
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("recovered S has minimum eigenvalue {min_eig:e} below {threshold:e}")]
    PosdefCheckFailed { min_eig: f64, threshold: f64 },
    #[error("closed-loop verification failed: {0}")]
    VerificationFailed(String),
    #[error("truncation order {order} too small, need at least {required}")]
    TruncationTooSmall { order: usize, required: usize },
    #[error("fixed point diverged after {iterations} iterations (residual {residual:e})")]
    FixedPointDiverged { iterations: usize, residual: f64 },
    #[error("S44 zero-order coefficient is not positive ({0:e})")]
    NonPositiveS44(f64),
    #[error("integration blew up at t = {t} (state norm {norm:e})")]
    IntegrationBlewUp { t: f64, norm: f64 },
    #[error("no full pseudo-period window available at t = {t}")]
    WindowUnavailable { t: f64 },
    #[error("duplicate harmonic {0} in oscillator bank")]
    DuplicateHarmonic(i64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
