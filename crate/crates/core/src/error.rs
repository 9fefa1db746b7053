use thiserror::Error;

pub type Result<T, E = MvpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MvpError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("traceability error: {0}")]
    Traceability(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("state error: {0}")]
    State(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("pretraining failed: {0}")]
    PretrainFailure(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("no history: {0}")]
    NoHistory(String),
    #[error("incomplete run: {0}")]
    IncompleteRun(String),
    #[error("checkpoint refused: {0}")]
    Checkpoint(String),
    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<MvpError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MvpError {
    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        MvpError::Phase {
            phase,
            source: Box::new(self),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::MvpError::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
