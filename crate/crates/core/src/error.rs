use thiserror::Error;

/// Every failure mode surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or layer wiring that cannot work together.
    #[error("structural error: {0}")]
    Structural(String),
    /// An argument outside the operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("annotation error: {0}")]
    Annotation(String),
    #[error("undefined score: {0}")]
    UndefinedScore(String),
    #[error("incompatible model pair: {0}")]
    IncompatiblePair(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::IncompatiblePair(_) => 3,
            Error::Training(_) => 4,
            Error::Consistency(_) => 5,
            _ => 1,
        }
    }
}

macro_rules! structural {
    ($($arg:tt)*) => { $crate::error::Error::Structural(format!($($arg)*)) };
}
macro_rules! domain {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
pub(crate) use domain;
pub(crate) use structural;
