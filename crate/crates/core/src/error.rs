use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the array engine, the data formats, and the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("geometry point cloud is empty")]
    EmptyGeometry,
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("target channel {0} has zero norm")]
    ZeroNormTarget(usize),
    #[error("subsample of {requested} requested but only {available} rows available")]
    SubsampleTooLarge { requested: usize, available: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid flow constants: {0}")]
    InvalidFlowConstants(String),
    #[error("normal vector at index {0} is not unit length")]
    NonUnitNormal(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
