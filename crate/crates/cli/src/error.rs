use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] slimfer_core::Error),
    #[error("config error: {0}")]
    Config(String),
    /// A correctness gate failed; `check` names it.
    #[error("check `{check}` failed: {detail}")]
    Gate { check: String, detail: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    pub fn gate(check: impl Into<String>, detail: impl Into<String>) -> Self {
        BenchError::Gate {
            check: check.into(),
            detail: detail.into(),
        }
    }
}
