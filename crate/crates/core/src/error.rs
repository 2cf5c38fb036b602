use std::path::PathBuf;

use thiserror::Error;

use crate::align::AlignError;
use crate::bc_signal::SignalError;
use crate::eval::EvalError;
use crate::explain::ExplainError;
use crate::features::FeatureError;
use crate::ingest::IngestError;
use crate::model::ModelError;
use crate::synth::SynthError;
use crate::vision::VisionError;

/// Any failure surfaced by the pipeline or the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Json { path: PathBuf, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("stage {stage}{}: {source}", input.as_ref().map(|p| format!(" (input {})", p.display())).unwrap_or_default())]
    Stage {
        stage: &'static str,
        input: Option<PathBuf>,
        #[source]
        source: Box<Error>,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        Error::Json {
            path: path.into(),
            message: e.to_string(),
        }
    }

    /// Attaches the failing stage and the input it was reading.
    pub fn in_stage(self, stage: &'static str, input: Option<PathBuf>) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                input,
                source: Box::new(e),
            },
        }
    }

    /// 2 for unreadable or malformed input, 3 when data violate a
    /// processing precondition, 4 for internal faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Json { .. } | Error::Config(_) | Error::Ingest(_) | Error::Synth(_) => EXIT_INPUT,
            Error::Vision(VisionError::BadImage(_)) => EXIT_INPUT,
            Error::Model(ModelError::Json(_) | ModelError::UnsupportedVersion(_)) => EXIT_INPUT,
            Error::Signal(_)
            | Error::Align(_)
            | Error::Vision(_)
            | Error::Features(_)
            | Error::Model(_)
            | Error::Eval(_)
            | Error::Explain(_) => EXIT_INVARIANT,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Internal(_) => EXIT_INTERNAL,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
