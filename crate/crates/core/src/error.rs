use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum RdError {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("score column contains a non-numeric value `{value}` (data row {row})")]
    NonNumericScore { row: usize, value: String },

    #[error("column `{column}` contains a non-numeric value `{value}`")]
    NonNumericColumn { column: String, value: String },

    #[error("no observations left after listwise deletion")]
    EmptyAfterDeletion,

    #[error("unknown column `{0}` in covariate expression")]
    UnknownColumn(String),

    #[error("malformed covariate expression: {0}")]
    MalformedExpression(String),

    #[error("bandwidth must be positive, got {0}")]
    NonpositiveBandwidth(f64),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("every design column was dropped as collinear")]
    AllColumnsDropped,

    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),

    #[error("design is numerically singular")]
    SingularDesign,

    #[error("cluster-robust variance requested but no cluster labels were supplied")]
    MissingClusters,

    #[error("cluster-robust variance needs at least two clusters, found {0}")]
    TooFewClusters(usize),

    #[error("group `{0}` has too few observations on one side of the cutoff")]
    GroupTooSmall(String),

    #[error("score has zero variance")]
    DegenerateScore,

    #[error("unknown label `{label}`; available labels: {}", available.join(", "))]
    UnknownLabel { label: String, available: Vec<String> },

    #[error("linear combination has no nonzero coefficient")]
    EmptyCombo,

    #[error("malformed linear combination: {0}")]
    MalformedCombo(String),

    #[error("contrast covariance matrix is singular")]
    SingularContrastCovariance,

    #[error("operation requires a {expected} result, found {found}")]
    ModeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error(
        "results file has schema version {found}, this build reads version {expected}; \
         re-run `rdhte` with this build to regenerate the file"
    )]
    SchemaVersion { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RdError>;

impl RdError {
    /// Variant name, used as a stable error code in command-line messages.
    pub fn kind(&self) -> &'static str {
        match self {
            RdError::MissingColumn(_) => "MissingColumn",
            RdError::NonNumericScore { .. } => "NonNumericScore",
            RdError::NonNumericColumn { .. } => "NonNumericColumn",
            RdError::EmptyAfterDeletion => "EmptyAfterDeletion",
            RdError::UnknownColumn(_) => "UnknownColumn",
            RdError::MalformedExpression(_) => "MalformedExpression",
            RdError::NonpositiveBandwidth(_) => "NonpositiveBandwidth",
            RdError::DimensionMismatch { .. } => "DimensionMismatch",
            RdError::AllColumnsDropped => "AllColumnsDropped",
            RdError::InsufficientObservations(_) => "InsufficientObservations",
            RdError::SingularDesign => "SingularDesign",
            RdError::MissingClusters => "MissingClusters",
            RdError::TooFewClusters(_) => "TooFewClusters",
            RdError::GroupTooSmall(_) => "GroupTooSmall",
            RdError::DegenerateScore => "DegenerateScore",
            RdError::UnknownLabel { .. } => "UnknownLabel",
            RdError::EmptyCombo => "EmptyCombo",
            RdError::MalformedCombo(_) => "MalformedCombo",
            RdError::SingularContrastCovariance => "SingularContrastCovariance",
            RdError::ModeMismatch { .. } => "ModeMismatch",
            RdError::SchemaVersion { .. } => "SchemaVersion",
            RdError::InvalidConfig(_) => "InvalidConfig",
            RdError::Csv(_) => "Csv",
            RdError::Io(_) => "Io",
            RdError::Json(_) => "Json",
        }
    }
}
