use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("SVD did not converge within {iterations} iterations")]
    SvdNoConvergence { iterations: usize },

    #[error("balancing step degenerate at iteration {iter}: half-iterate has zero norm")]
    BalancingDegenerate { iter: usize },

    #[error("diverged at iteration {iter}: {reason}")]
    Divergence { iter: usize, reason: String },

    #[error("rate fit degenerate: {0}")]
    FitDegenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed instance file: {0}")]
    Malformed(String),

    #[error("unsupported instance file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable code written into CSV status columns.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite(_) => "non_finite",
            Error::SvdNoConvergence { .. } => "svd_no_convergence",
            Error::BalancingDegenerate { .. } => "balancing_degenerate",
            Error::Divergence { .. } => "divergence",
            Error::FitDegenerate(_) => "fit_degenerate",
            Error::Config(_) => "config",
            Error::Malformed(_) => "malformed",
            Error::Version { .. } => "version",
            Error::Io(_) => "io",
        }
    }
}
