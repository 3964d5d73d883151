//! Configuration and stage orchestration for the `stratflow` binary.

pub mod config;
pub mod pipeline;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, Stage};

use stratflow_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` is missing input from `{producer}`: {missing}")]
    Dependency {
        stage: &'static str,
        producer: &'static str,
        missing: String,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl PipelineError {
    /// 2 config, 3 dependency, 4 numeric guard, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Dependency { .. } => 3,
            PipelineError::Core(e) => match e {
                CoreError::InvalidParameter(_) | CoreError::DimensionMismatch { .. } => 2,
                CoreError::DegenerateStep { .. }
                | CoreError::StepFailed { .. }
                | CoreError::Constraint(_)
                | CoreError::CostGuard(_)
                | CoreError::Structural(_)
                | CoreError::Oracle { .. } => 4,
                _ => 1,
            },
            _ => 1,
        }
    }
}
