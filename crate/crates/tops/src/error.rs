use std::path::PathBuf;

/// Exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for problems with the input data.
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("cannot read {}: {source}", path.display())]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {}: {source}", path.display())]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {reason}", path.display())]
    BadRow { path: PathBuf, line: u64, reason: String },

    #[error("{} holds no readings", path.display())]
    Empty { path: PathBuf },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] tops_core::Error),
}

impl ToolError {
    pub fn config(msg: impl Into<String>) -> Self {
        ToolError::Config(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ToolError::Unreadable { .. } | ToolError::BadRow { .. } | ToolError::Empty { .. } => EXIT_DATA,
            ToolError::Unwritable { .. } | ToolError::Config(_) => EXIT_CONFIG,
            ToolError::Core(e) => match e {
                tops_core::Error::DataContract { .. } | tops_core::Error::LengthMismatch { .. } => EXIT_DATA,
                _ => EXIT_CONFIG,
            },
        }
    }
}

pub type Result<T, E = ToolError> = std::result::Result<T, E>;
