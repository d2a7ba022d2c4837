use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shrinkage factor undefined: psi = 0 and beta' Sigma beta + sigma2_nu = 0")]
    DegenerateVariance,

    #[error("exponent {exponent} is outside the representable range of f64")]
    Overflow { exponent: f64 },

    #[error("moment matrix is numerically singular (condition estimate {condition:e}){}",
        left_out.map(|j| format!(" when leaving out area index {j}")).unwrap_or_default())]
    SingularMomentMatrix {
        condition: f64,
        left_out: Option<usize>,
    },

    #[error("{m} areas are not enough to fit {p} regression coefficients")]
    InsufficientAreas { m: usize, p: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("measurement-error covariance for area '{area}' is not symmetric positive semi-definite")]
    NonPsdSigma { area: String },

    #[error("parse error at line {line}, column '{column}': {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("column '{column}' at line {line} must be strictly positive on the raw scale, got {value}")]
    NonPositiveValue {
        line: usize,
        column: String,
        value: f64,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DegenerateVariance
            | Error::Overflow { .. }
            | Error::SingularMomentMatrix { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateVariance => "DegenerateVariance",
            Error::Overflow { .. } => "Overflow",
            Error::SingularMomentMatrix { .. } => "SingularMomentMatrix",
            Error::InsufficientAreas { .. } => "InsufficientAreas",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidInput(_) => "InvalidInput",
            Error::NonPsdSigma { .. } => "NonPsdSigma",
            Error::Parse { .. } => "ParseError",
            Error::NonPositiveValue { .. } => "NonPositiveValue",
            Error::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
