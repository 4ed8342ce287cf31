use thiserror::Error;

/// Errors raised while loading data, building models, or evaluating them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("load error: {0}")]
    Load(String),

    #[error("parse error at data row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid design: {0}")]
    Design(String),

    #[error("parameter outside its domain: {0}")]
    Domain(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The inner Newton solve for the random effects hit its iteration cap.
    #[error("inner Newton did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    InnerNotConverged {
        iterations: usize,
        grad_norm: f64,
        best: Vec<f64>,
    },

    #[error("model spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
