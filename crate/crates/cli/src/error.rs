use albumfill_core::engine::EngineError;
use albumfill_core::eval::EvalError;
use albumfill_core::gateway::GatewayError;
use albumfill_core::judge::JudgeError;

/// A command failure with a stable machine-readable code. Provider failures
/// exit with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub provider: bool,
    pub stage: Option<String>,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            provider: false,
            stage: None,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new("invalid_input", message)
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        if self.provider {
            2
        } else {
            1
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        Self {
            code: e.code().into(),
            message: e.to_string(),
            provider: e.is_provider(),
            stage: e.stage().map(|s| s.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        Self {
            code: e.code().into(),
            message: e.to_string(),
            provider: true,
            stage: None,
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gateway(g) => g.into(),
            other => {
                let code = match other {
                    EvalError::InsufficientDepth { .. } => "insufficient_depth",
                    EvalError::IdMismatch(_) => "id_mismatch",
                    EvalError::ShapeMismatch { .. } => "shape_mismatch",
                    _ => "eval",
                };
                Self::new(code, other.to_string())
            }
        }
    }
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        let code = match e {
            JudgeError::SameModel(_) => "same_model",
            JudgeError::MissingReasoning(_) => "missing_reasoning",
            JudgeError::EmptyInstruction => "empty_instruction",
            JudgeError::Unparseable(_) => "unparseable",
        };
        Self::new(code, e.to_string())
    }
}

impl From<albumfill_core::model::ManifestError> for CliError {
    fn from(e: albumfill_core::model::ManifestError) -> Self {
        Self::new("manifest", e.to_string())
    }
}

impl From<albumfill_core::embedding::EmbeddingError> for CliError {
    fn from(e: albumfill_core::embedding::EmbeddingError) -> Self {
        Self::new("embeddings", e.to_string())
    }
}

impl From<albumfill_core::pipeline::PipelineError> for CliError {
    fn from(e: albumfill_core::pipeline::PipelineError) -> Self {
        Self::new("pipeline", e.to_string())
    }
}

impl From<albumfill_core::mask::MaskError> for CliError {
    fn from(e: albumfill_core::mask::MaskError) -> Self {
        Self::new("mask_shape", e.to_string())
    }
}

impl From<albumfill_core::imageio::ImageIoError> for CliError {
    fn from(e: albumfill_core::imageio::ImageIoError) -> Self {
        Self::new("image", e.to_string())
    }
}

impl From<albumfill_core::gateway::config::ConfigError> for CliError {
    fn from(e: albumfill_core::gateway::config::ConfigError) -> Self {
        Self::config(e.to_string())
    }
}
