use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("graph contains a cycle through node `{0}`")]
    Cycle(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge after {subdivisions} subdivisions (error estimate {estimate:e}, tolerance {tol:e})")]
    Quadrature {
        subdivisions: usize,
        estimate: f64,
        tol: f64,
    },

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("threshold iteration did not converge in {iters} iterations (last k1 = {last_k1})")]
    MaxIterations { iters: usize, last_k1: f64 },

    #[error("unsupported node kind `{kind}` at `{id}`")]
    Unsupported { id: String, kind: String },

    #[error("missing threshold for insertion point `{0}`")]
    MissingThreshold(String),

    #[error("membrane overflow at node `{node}`, step {t}: thresholds are likely miscalibrated")]
    Overflow { node: String, t: usize },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error was caused by the caller's inputs rather than an
    /// internal failure.
    pub fn is_bad_input(&self) -> bool {
        !matches!(self, Error::Quadrature { .. } | Error::NonFinite(_))
    }
}
