use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    NotFound(String),

    /// Call not allowed in the session's current status.
    #[error("{0}")]
    Conflict(String),

    /// A refit is in progress; retry later.
    #[error("session is fitting")]
    Busy,

    #[error("{0}")]
    Invalid(String),

    #[error("{0}")]
    Internal(String),

    #[error(transparent)]
    Core(#[from] alfd_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;
