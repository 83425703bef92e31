use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    ConfigInvalid(Vec<String>),
    #[error("missing artifact {}; run the upstream stage first", .0.display())]
    MissingArtifact(PathBuf),
    #[error("stage {stage} failed: {message}")]
    StageFailed {
        stage: &'static str,
        message: String,
    },
}

impl PipelineError {
    pub fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        Self::StageFailed {
            stage,
            message: e.to_string(),
        }
    }

    /// Process exit code. Usage errors exit with 2 from the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::ConfigInvalid(_) => 3,
            Self::MissingArtifact(_) => 4,
            Self::StageFailed { .. } => 5,
        }
    }
}
