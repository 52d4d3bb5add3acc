use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report, grouped by the class the CLI maps
/// onto an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("training error in `{param}`: {detail}")]
    Training { param: String, detail: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn training(param: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Training {
            param: param.into(),
            detail: detail.into(),
        }
    }

    /// Short machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Shape { .. } => "config",
            Error::Usage(_) => "usage",
            Error::Unsupported(_) => "unsupported",
            Error::Input(_) => "input",
            Error::Training { .. } => "training",
            Error::Numerical(_) => "numerical",
            Error::Io(_) | Error::Csv(_) => "io",
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::Unsupported(_) => 2,
            Error::Usage(_) | Error::Input(_) => 3,
            Error::Training { .. } | Error::Numerical(_) => 4,
            Error::Io(_) | Error::Csv(_) => 5,
        }
    }
}
