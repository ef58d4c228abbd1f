use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt pages: {0}")]
    CorruptPages(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("page {page} is not stored at layer {layer}")]
    MissingPage { layer: usize, page: usize },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput => "EmptyInput",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::CorruptPages(_) => "CorruptPages",
            Error::Shape(_) => "ShapeError",
            Error::MissingPage { .. } => "MissingPage",
            Error::Numerical(_) => "NumericalError",
            Error::InvalidSelection(_) => "InvalidSelection",
            Error::InvalidState(_) => "InvalidState",
            Error::Label(_) => "LabelError",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
