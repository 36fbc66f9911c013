use thiserror::Error;

pub type Result<T> = std::result::Result<T, CsError>;

#[derive(Debug, Error)]
pub enum CsError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage 2 requires parameters initialized from a stage 1 checkpoint")]
    MissingStage1Init,
    #[error("style {0} is not bound in this stage")]
    UnboundStyle(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("metric {metric}: {msg}")]
    Metric { metric: &'static str, msg: String },
    #[error("training diverged at {phase} iteration {iter}: {source}")]
    Diverged {
        phase: &'static str,
        iter: usize,
        #[source]
        source: numcore::NumError,
    },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Num(#[from] numcore::NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CsError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CsError::Config(msg.into())
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CsError::Config(_) => "CONFIG",
            CsError::MissingStage1Init => "MISSING_STAGE1_INIT",
            CsError::UnboundStyle(_) => "UNBOUND_STYLE",
            CsError::TokenOutOfRange { .. } => "TOKEN_OUT_OF_RANGE",
            CsError::Metric { .. } => "METRIC",
            CsError::Diverged { .. } => "DIVERGED",
            CsError::Format { .. } => "FORMAT",
            CsError::Num(_) => "NUMERIC",
            CsError::Io(_) => "IO",
            CsError::Json(_) => "JSON",
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            CsError::Config(_)
                | CsError::MissingStage1Init
                | CsError::UnboundStyle(_)
                | CsError::Format { .. }
                | CsError::Json(_)
        )
    }
}
