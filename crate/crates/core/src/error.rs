use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{line}:{column}: syntax error: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("map {map} sends {point:?} outside the domain box")]
    OutOfBox { map: usize, point: Vec<f64> },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("probability error: {0}")]
    Probability(String),

    #[error("singular derivative: |phi'({x})| = {value:e} for map {map}")]
    SingularDerivative { map: usize, x: f64, value: f64 },

    #[error("not a probability measure: {0}")]
    Measure(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Syntax { .. }
            | Error::Config(_)
            | Error::Dimension(_)
            | Error::Range(_)
            | Error::OutOfBox { .. }
            | Error::Unsupported(_) => 2,
            Error::Eval(_)
            | Error::Probability(_)
            | Error::SingularDerivative { .. }
            | Error::Measure(_) => 3,
            Error::Io { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
