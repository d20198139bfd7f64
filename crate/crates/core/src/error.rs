use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot compose an empty list of rotations")]
    EmptyComposition,

    #[error("scripted drift trace exhausted at iteration {0}")]
    TraceExhausted(u64),

    #[error("matrix is not positive semi-definite (minimum eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("tomography record contains no counts")]
    ZeroCounts,

    #[error("reference state is not full rank on the traversed subsystem (smallest singular value {0:e})")]
    RankDeficientReference(f64),

    #[error("normalization denominator is zero")]
    ZeroDenominator,

    #[error("insufficient samples at level {level}: {have} of {need}")]
    InsufficientSamples {
        level: usize,
        have: usize,
        need: usize,
    },

    #[error("calibration failed to converge; per-step residuals {residuals:?}")]
    CalibrationFailed { residuals: Vec<f64> },

    #[error("MUB wiring violation: {0}")]
    MubViolation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mismatched iteration grids: {0} vs {1} rows")]
    GridMismatch(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyComposition => "empty_composition",
            Error::TraceExhausted(_) => "trace_exhausted",
            Error::NotPositiveSemidefinite(_) => "not_psd",
            Error::DimensionMismatch(..) => "dimension_mismatch",
            Error::ZeroCounts => "zero_counts",
            Error::RankDeficientReference(_) => "rank_deficient_reference",
            Error::ZeroDenominator => "zero_denominator",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::CalibrationFailed { .. } => "calibration_failed",
            Error::MubViolation(_) => "mub_violation",
            Error::Config(_) => "config",
            Error::GridMismatch(..) => "grid_mismatch",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
