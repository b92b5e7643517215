use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension {0} (only d = 2 and d = 3)")]
    UnsupportedDimension(usize),

    #[error("grid too coarse: n = {0}, need n >= 8")]
    GridTooCoarse(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance is singular on the diagonal (x = y)")]
    DiagonalSingularity,

    #[error("covariance matrix is not positive semi-definite: min eigenvalue {min_eigenvalue:e}, max eigenvalue {max_eigenvalue:e}")]
    NotPositiveSemiDefinite { min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("Cholesky factorization failed at pivot {pivot} (value {value:e}) after one jitter attempt")]
    FactorizationFailure { pivot: usize, value: f64 },

    #[error("scale eta = {eta} not resolved by the grid (h = {h}, need eta >= 8h)")]
    ScaleUnresolved { eta: f64, h: f64 },

    #[error("support violation: {0}")]
    SupportViolation(String),

    #[error("field sample has no variance profile")]
    MissingVariance,

    #[error("quadrature did not converge: {coarse:e} at level {level} vs {fine:e} at level {}", level + 1)]
    NonConverged { coarse: f64, fine: f64, level: u32 },

    #[error("quadrature infeasible in dimension {0}")]
    InfeasibleDimension(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid dyadic interval (level {level}, index {index})")]
    InvalidInterval { level: u32, index: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("replica {replica}{}: {source}", scale.map(|e| format!(", eta = {e}")).unwrap_or_default())]
    InReplica {
        replica: u64,
        scale: Option<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn in_replica(self, replica: u64, scale: Option<f64>) -> Error {
        Error::InReplica { replica, scale, source: Box::new(self) }
    }
}
