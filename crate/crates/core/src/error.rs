use thiserror::Error;

/// Every failure the simulator can surface.
#[derive(Debug, Error)]
pub enum FsslError {
    #[error("vector norm {0:e} is too small to normalize")]
    ZeroNorm(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("need at least {needed} points to form {needed} clusters, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("activation cache does not match the parameters it is used with")]
    CacheMismatch,
    #[error("memory queue is empty")]
    EmptyQueue,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("no hallucinated positives satisfied the selector constraint")]
    NoSelectedPositives,
    #[error("positive key set is empty")]
    EmptyPositives,
    #[error("mu must lie in [0, 1], got {0}")]
    MuOutOfRange(f64),
    #[error("queue holds {have} entries, {need} required")]
    InsufficientQueue { have: usize, need: usize },
    #[error("geodesic is degenerate (cos = {0})")]
    DegenerateGeodesic(f64),
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("target class {class} has {have} samples, {need} requested")]
    InsufficientTargetSamples {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("model replacement needs at least two participating clients")]
    SingleClient,
    #[error("defense needs at least {need} clients, got {have}")]
    TooFewClients { need: usize, have: usize },
    #[error("every client update has non-positive trust")]
    AllZeroTrust,
    #[error("class {class} has {have} samples, at least 2 required")]
    ClassTooSmall { class: usize, have: usize },
    #[error("probe training needs at least two classes")]
    SingleClass,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("no samples outside the target class to trigger")]
    NoEligibleSamples,
    #[error("input dimension {dim} is smaller than class count {classes}")]
    DimTooSmall { dim: usize, classes: usize },
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("update set is empty")]
    EmptyUpdateSet,
    #[error("invalid layer layout: {0}")]
    InvalidLayout(String),
    #[error("invalid config field `{field}`: {msg}")]
    ConfigInvalid { field: String, msg: String },
    #[error("no metrics found: {0}")]
    MissingMetrics(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FsslError {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        FsslError::ConfigInvalid {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FsslError>;
