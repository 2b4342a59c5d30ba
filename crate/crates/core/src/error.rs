use thiserror::Error;

pub type Result<T, E = OanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OanError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("degenerate vector in {context}: row {row} has norm below threshold")]
    Degenerate { context: &'static str, row: usize },
    #[error("{op} needs at least two rows, got {rows}")]
    InsufficientPairs { op: &'static str, rows: usize },
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} out of range for {len} entries")]
    Lookup { index: usize, len: usize },
    #[error("label {label} at row {row} is not a valid class index (< {classes})")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("row {row} is not a probability distribution (sum {sum})")]
    Distribution { row: usize, sum: f64 },
    #[error("batch has no instances")]
    EmptyBatch,
    #[error("function is not deterministic: replay produced {first} then {second}")]
    Determinism { first: f64, second: f64 },
    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("unsupported format version: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl OanError {
    pub fn config(msg: impl Into<String>) -> Self {
        OanError::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        OanError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
