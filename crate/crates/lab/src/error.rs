use std::path::PathBuf;

use feedback_lab_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{} already exists (pass --force to overwrite)", .0.display())]
    Collision(PathBuf),
    #[error("{0}")]
    Emit(String),
    #[error("{0}")]
    Unsolvable(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation(_) => 2,
            LabError::Core(CoreError::Domain(_) | CoreError::Config(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }
}

pub type LabResult<T> = Result<T, LabError>;
