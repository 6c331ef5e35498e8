use std::path::PathBuf;

/// Errors raised across the toolkit. The variant doubles as the
/// machine-readable failure class reported by the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("infeasible ceiling of {ceiling} elements; blocking sites: {}", sites.join(","))]
    Infeasible { ceiling: u64, sites: Vec<String> },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable tag for logs and the CLI's stderr line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Parameter(_) => "parameter",
            Error::Numerical(_) => "numerical",
            Error::State(_) => "state",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Lookup(_) => "lookup",
            Error::Infeasible { .. } => "infeasible",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
