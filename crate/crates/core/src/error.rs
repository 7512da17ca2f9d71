use thiserror::Error;

/// Errors raised by estimation, resampling, deconvolution and theory routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("design matrix is rank deficient (numerical rank {rank} < {p} columns)")]
    RankDeficient { rank: usize, p: usize },

    #[error("solver did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("scale estimate is degenerate (zero variance)")]
    DegenerateScale,

    #[error("{failed} of {total} bootstrap replicates failed (limit is 5%)")]
    ExcessiveFailures { failed: usize, total: usize },

    #[error("replicate {replicate} needed more than {limit} redraws to obtain a nonsingular design")]
    TooManyRedraws { replicate: usize, limit: usize },

    #[error("at least 2 replicates are required, got {0}")]
    InsufficientReplicates(usize),

    #[error(
        "gaussian characteristic function underflows at bandwidth {bandwidth:.4e}; \
         try a bandwidth of at least {suggested:.4e}"
    )]
    NumericalUnderflow { bandwidth: f64, suggested: f64 },

    #[error("cdf has no positive increments after tail clamping")]
    DegenerateCdf,

    #[error("design row {0} is identically zero")]
    ZeroRow(usize),

    #[error("could not bracket the root on [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("no weight mixture in [0, 1] matches the target variance at kappa = {kappa}")]
    NoSolution { kappa: f64 },

    #[error("curvature matrix is numerically singular (min/max eigenvalue ratio {ratio:.3e})")]
    SingularCurvature { ratio: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics, as opposed to malformed input or I/O.
    pub fn is_numeric(&self) -> bool {
        !matches!(
            self,
            Error::InvalidInput(_) | Error::Config(_) | Error::Io(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
