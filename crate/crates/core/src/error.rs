use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: String, right: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("integration error: {0}")]
    Integration(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Failure while processing one named input image (e.g. `back`, `per_2`).
    #[error("[{role}] {source}")]
    Role {
        role: String,
        #[source]
        source: Box<Error>,
    },

    /// Failure inside the sampling loop, tagged with timestep and stage.
    #[error("t={t} stage={stage}: {source}")]
    Stage {
        t: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dims(left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn with_role(self, role: impl Into<String>) -> Self {
        Error::Role {
            role: role.into(),
            source: Box::new(self),
        }
    }

    pub fn at_stage(self, t: usize, stage: &'static str) -> Self {
        Error::Stage {
            t,
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with role/stage context peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Role { source, .. } | Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 for usage/validation problems, 3 for numeric or runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Dimension { .. }
            | Error::Parameter(_)
            | Error::Format(_)
            | Error::Validation(_)
            | Error::NotFound(_) => 2,
            Error::Numeric(_)
            | Error::Schedule(_)
            | Error::Training { .. }
            | Error::Integration(_)
            | Error::Io { .. } => 3,
            Error::Role { .. } | Error::Stage { .. } => unreachable!("root() strips context"),
        }
    }
}
