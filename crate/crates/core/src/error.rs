use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported exponent {0}: kernels |x|^p need p > -2 to be locally integrable in 3D")]
    UnsupportedExponent(f64),

    #[error("singular evaluation: {0}")]
    Singular(String),

    #[error("invalid kernel parameters: {0}")]
    InvalidKernel(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch between fields")]
    GeometryMismatch,

    #[error("infeasible mass {mass}: grid volume is {capacity}")]
    InfeasibleMass { mass: f64, capacity: f64 },

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("non-finite energy encountered: {0}")]
    NonFinite(String),

    #[error("invalid chemical potential {0}: must be positive")]
    InvalidChemicalPotential(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bracket invalid: {0}")]
    BracketInvalid(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
