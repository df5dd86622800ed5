use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("operation `{0}` has no registered gradient")]
    UnsupportedOp(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid quad: {0}")]
    InvalidQuad(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("need at least {need} observations, got {got}")]
    SampleSize { need: usize, got: usize },
    #[error("degenerate baseline: {0}")]
    DegenerateBaseline(String),
    #[error("victim training stopped below the accuracy floor: {0}")]
    AccuracyFloor(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{id}: {source}")]
    Item { id: String, source: Box<Error> },
    #[error("{path}: {source}")]
    Path { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image codec: {0}")]
    Image(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::UnsupportedOp(_) => "unsupported_op",
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::InvalidQuad(_) => "invalid_quad",
            Error::Singular(_) => "singular",
            Error::DegenerateBox(_) => "degenerate_box",
            Error::SampleSize { .. } => "sample_size",
            Error::DegenerateBaseline(_) => "degenerate_baseline",
            Error::AccuracyFloor(_) => "accuracy_floor",
            Error::Format(_) => "format",
            Error::Manifest(_) => "manifest",
            Error::Item { source, .. } => source.kind(),
            Error::Path { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }

    pub fn with_item(self, id: impl Into<String>) -> Error {
        Error::Item { id: id.into(), source: Box::new(self) }
    }

    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Path { path: path.into(), source }
    }
}
