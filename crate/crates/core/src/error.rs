use alloc::string::String;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Inconsistent or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Shapes of matrices or vectors do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A non-finite value was produced or supplied.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A propensity model could not be fit (e.g. a single treatment class).
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    /// Prefix the message with extra context, keeping the variant.
    pub fn context(self, ctx: &str) -> Self {
        use alloc::format;
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::DegenerateFit(m) => Error::DegenerateFit(format!("{ctx}: {m}")),
        }
    }
}
