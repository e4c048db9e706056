use std::path::PathBuf;

use thiserror::Error;

/// Step of the plane estimation pipeline, used to tag propagated errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneStep {
    Minor,
    Rank,
    Completion,
    Normalization,
    Reduction,
    Fit,
    Lift,
}

impl std::fmt::Display for PlaneStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PlaneStep::Minor => "observed minor",
            PlaneStep::Rank => "rank estimate",
            PlaneStep::Completion => "completion",
            PlaneStep::Normalization => "normalization",
            PlaneStep::Reduction => "dimension reduction",
            PlaneStep::Fit => "affine fit",
            PlaneStep::Lift => "lift",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum LlsError {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("model not applicable: {0}")]
    NotApplicable(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model generation failed: {0}")]
    Generation(String),

    #[error("step {step}: {source}")]
    Step {
        step: PlaneStep,
        #[source]
        source: Box<LlsError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = LlsError> = std::result::Result<T, E>;

impl LlsError {
    pub(crate) fn at(self, step: PlaneStep) -> LlsError {
        LlsError::Step {
            step,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping step tags.
    pub fn root(&self) -> &LlsError {
        match self {
            LlsError::Step { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 3 data/validation, 4 model not applicable, 5 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            LlsError::NotApplicable(_) => 4,
            LlsError::Degenerate(_) => 4,
            LlsError::Numerical(_) | LlsError::Overflow(_) => 5,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LlsError {
    let path = path.into();
    move |source| LlsError::Io { path, source }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> LlsError {
    let path = path.into();
    move |source| LlsError::Json { path, source }
}
