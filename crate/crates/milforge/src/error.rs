use std::fmt;

/// Shape of a matrix operand, kept for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape { op: String, lhs: Shape, rhs: Shape },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bag contains no instances")]
    EmptyBag,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),
}

impl Error {
    pub fn shape(op: &str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape {
            op: op.to_string(),
            lhs: Shape(lhs.0, lhs.1),
            rhs: Shape(rhs.0, rhs.1),
        }
    }

    /// Stable exit-code contract: 0 success, 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Config(_) => 1,
            Error::Io(_)
            | Error::Format(_)
            | Error::Dimension(_)
            | Error::Bounds(_)
            | Error::MissingData(_)
            | Error::Stratification(_)
            | Error::UndefinedMetric(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
