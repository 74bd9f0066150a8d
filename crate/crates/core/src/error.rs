use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    #[error("duplicate name {0:?}")]
    DuplicateName(String),

    #[error("unknown module {0:?}")]
    UnknownModule(String),

    #[error("channel index {index} out of range for module {module:?} with {n_channels} channels")]
    ChannelOutOfRange {
        module: String,
        index: usize,
        n_channels: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("header mismatch: field {field:?} differs")]
    HeaderMismatch { field: &'static str },

    #[error("frame length mismatch: expected {expected} values, got {got}")]
    FrameLength { expected: usize, got: usize },

    #[error("premature end of stream: expected {expected} frames, got {got}")]
    PrematureEnd { expected: u64, got: u64 },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("malformed input_set_hash: {0}")]
    MalformedHash(String),

    #[error("empty role filter: no tokens match {0}")]
    EmptyRoleFilter(String),

    #[error("zero token count for channel {0}")]
    ZeroTokenCount(String),

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("universe mismatch: {0}")]
    UniverseMismatch(String),

    #[error("mixed source models: {0:?} vs {1:?}")]
    MixedSources(String, String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line contract: 3 for IO failures,
    /// 2 for every input or contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            _ => 2,
        }
    }
}
