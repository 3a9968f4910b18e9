use std::path::PathBuf;

/// Errors surfaced by the pipeline, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] goalcast_core::Error),
    #[error("training fault in stage '{stage}' at batch {batch}: {msg}")]
    TrainingFault { stage: String, batch: usize, msg: String },
    #[error("missing or unusable checkpoint: {0}")]
    State(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 1 usage/config, 2 data, 3 training fault or missing model state.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Data(_) | Self::Io { .. } => 2,
            Self::TrainingFault { .. } | Self::State(_) => 3,
        }
    }
}

impl From<goalcast_models::Error> for PipelineError {
    fn from(e: goalcast_models::Error) -> Self {
        use goalcast_models::Error as M;
        match e {
            M::Core(c) => Self::Data(c),
            M::Config(m) => Self::Config(m),
            M::State(m) => Self::State(m),
            M::TrainingFault { stage, batch, msg } => Self::TrainingFault { stage, batch, msg },
            M::Nn(n) => Self::from(n),
        }
    }
}

impl From<goalcast_nn::Error> for PipelineError {
    fn from(e: goalcast_nn::Error) -> Self {
        use goalcast_nn::Error as N;
        match e {
            N::Checkpoint { .. } | N::MissingParam(_) => Self::State(e.to_string()),
            N::Io { path, source } => Self::Io { path, source },
            N::Shape(m) => Self::Config(m),
        }
    }
}
