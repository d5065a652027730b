use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("numerical error at node {node}: {message}")]
    Numerical { node: usize, message: String },

    #[error("admission check failed: {0}")]
    Admission(String),

    #[error("no convergence after {iterations} iterations (last difference {last_delta:.3e})")]
    NonConvergence { iterations: usize, last_delta: f64 },

    #[error("{module}: {source}")]
    Module {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_module(self, module: &'static str) -> Error {
        match self {
            e @ Error::Module { .. } => e,
            e => Error::Module { module, source: Box::new(e) },
        }
    }

    /// The innermost error, skipping module wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Module { source, .. } => source.root(),
            e => e,
        }
    }
}
