use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] qelim_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("not a QEC1 checkpoint (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    TruncatedFile,

    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("{0}")]
    Config(String),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFY_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const IO: i32 = 4;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use qelim_core::Error as C;
        match self {
            Error::Core(e) => match e {
                C::SingularMatrix { .. }
                | C::NotPositiveDefinite { .. }
                | C::ConditioningFailure { .. }
                | C::NotZeroMean { .. }
                | C::OutsideImageBall { .. }
                | C::ZeroEntryInV { .. }
                | C::ConditionNotSatisfied { .. }
                | C::AllTargetsDegenerate => exit::NUMERICAL,
                _ => exit::CONFIG,
            },
            Error::Json { .. } | Error::Config(_) => exit::CONFIG,
            Error::Io { .. }
            | Error::BadMagic
            | Error::VersionMismatch { .. }
            | Error::TruncatedFile
            | Error::ChecksumMismatch { .. }
            | Error::Malformed(_) => exit::IO,
        }
    }
}
