use alloc::string::String;

/// Errors raised anywhere in the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("singular matrix: pivot magnitude {pivot:e} below 1e-12")]
    SingularMatrix { pivot: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("assumption {name} violated: {detail}")]
    Assumption { name: &'static str, detail: String },

    #[error("construction failed: {0}")]
    Construction(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
