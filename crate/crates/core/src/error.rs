use thiserror::Error;

/// Errors raised anywhere in the homogenization and optimization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("raster resolution {0} is below the minimum of 8")]
    Resolution(usize),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("cell problem for subdomain {subdomain} failed: {source}")]
    Cell {
        subdomain: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no micro record for subdomain {0}")]
    MissingRecord(usize),

    #[error("degenerate mapping near {location:?}: det J = {det:e}")]
    DegenerateMap { location: Vec<f64>, det: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dim(expected: usize, got: usize) -> Self {
        Error::Dimension { expected, got }
    }
}
