use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(
        "the noise power must be constrained: r*eps^2 = {sigma2:.6e} exceeds power cap s = {cap:.6e}"
    )]
    PowerConstraint { sigma2: f64, cap: f64 },

    #[error("known pilot at position {0} is zero")]
    ZeroPilot(usize),

    #[error("regularized correlation matrix is not positive definite")]
    Singular,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("label space mismatch: generator has {generator} classes, target has {target}")]
    LabelSpace { generator: usize, target: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::PowerConstraint { .. } => 2,
            _ => 3,
        }
    }
}
