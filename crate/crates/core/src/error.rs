use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column: {0}")]
    MissingColumn(String),
    #[error("column `{0}` does not map to any role (y, x*, z1_*, ziv_*)")]
    UnmappedColumn(String),
    #[error("non-numeric cell at data row {row}, column `{col}`")]
    NonNumericCell { row: usize, col: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("too few rows: have {have}, need at least {need}")]
    TooFewRows { have: usize, need: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("segment too short: length {len}, minimum {min}")]
    SegmentTooShort { len: usize, min: usize },
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("singular weighting matrix: {0}")]
    SingularWeighting(String),
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),
    #[error("matrix is not positive definite: {0}")]
    NotPd(String),
    #[error("HAC bandwidth {bandwidth} too large for {n} observations")]
    BandwidthTooLarge { bandwidth: usize, n: usize },
    #[error("empty or too short moment series")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no admissible candidate break: {0}")]
    NoCandidates(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularDesign(_)
                | Error::SingularWeighting(_)
                | Error::NotPsd(_)
                | Error::NotPd(_)
                | Error::NoCandidates(_)
        )
    }
}
