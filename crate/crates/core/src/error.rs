use std::fmt;

/// Crate-wide error type. Construction errors are reported eagerly so the
/// training loop itself never has to unwind: instability during optimization
/// is signalled through cost sentinels, not through this enum.
#[derive(Debug)]
pub enum Error {
    /// Graph violates an interconnection invariant (self-loop, duplicate edge,
    /// out-of-range index, disconnected).
    InvalidGraph(String),
    /// A physical or algorithmic parameter is outside its admissible range.
    InvalidParameter(String),
    /// Matrix or vector dimensions do not line up.
    ShapeMismatch(String),
    /// The closed loop is unstable where a finite evaluation is required.
    UnstablePolicy { spectral_radius: f64 },
    /// A disturbance trace ran out of rows.
    TraceExhausted { step: usize, rows: usize },
    /// Operation defined only for a specific disturbance variant.
    UnsupportedDisturbance(&'static str),
    /// An iterative numerical routine failed to converge or produced
    /// non-finite values.
    Numerical(String),
    /// Config file violated one or more constraints; every violation listed.
    InvalidConfig(Vec<String>),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidGraph(msg) => write!(f, "invalid graph: {msg}"),
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::UnstablePolicy { spectral_radius } => {
                write!(f, "closed loop unstable (spectral radius {spectral_radius:.6})")
            }
            Error::TraceExhausted { step, rows } => {
                write!(f, "disturbance trace exhausted: step {step} but only {rows} rows")
            }
            Error::UnsupportedDisturbance(what) => {
                write!(f, "operation requires {what} disturbance")
            }
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::InvalidConfig(violations) => {
                writeln!(f, "invalid config ({} violation(s)):", violations.len())?;
                for v in violations {
                    writeln!(f, "  - {v}")?;
                }
                Ok(())
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
