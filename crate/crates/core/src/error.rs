use thiserror::Error;

/// Errors raised by the editing engine.
#[derive(Debug, Error)]
pub enum EditError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EditError {
    /// Prefix the message with the layer or batch where the failure happened.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            EditError::Config(m) => EditError::Config(format!("{what}: {m}")),
            EditError::Input(m) => EditError::Input(format!("{what}: {m}")),
            EditError::Numerical(m) => EditError::Numerical(format!("{what}: {m}")),
            EditError::Divergence { step, detail } => EditError::Divergence {
                step,
                detail: format!("{what}: {detail}"),
            },
            EditError::Format(m) => EditError::Format(format!("{what}: {m}")),
            other => other,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, EditError::Numerical(_) | EditError::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, EditError>;
