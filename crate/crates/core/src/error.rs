use ens_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum EnsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration: {0}")]
    Config(String),

    #[error("architecture code component {stage} = {value} outside [0, {max}]")]
    Code { stage: usize, value: usize, max: usize },

    #[error("training diverged at step {step} (last finite loss {last_loss})")]
    Training { step: usize, last_loss: f64 },

    #[error("numerical: {0}")]
    Numerical(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("distillation failed for {}", .0.join(", "))]
    Distill(Vec<String>),

    #[error("evaluating code {code:?}: {source}")]
    Evaluation {
        code: Vec<usize>,
        #[source]
        source: Box<EnsError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EnsError> = std::result::Result<T, E>;

impl EnsError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        EnsError::Config(msg.into())
    }
}
