use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while parsing a `.omlc` container.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:02x?}, expected \"OMC1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    BadVersion(u8),
    #[error("truncated container: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("model checksum mismatch: container {found:#010x}, model {expected:#010x}")]
    ChecksumMismatch { expected: u32, found: u32 },
    #[error("{0} trailing bytes after last patch")]
    TrailingBytes(usize),
    #[error("invalid header field: {0}")]
    InvalidField(String),
}

impl FormatError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic(_) => 1,
            FormatError::BadVersion(_) => 2,
            FormatError::Truncated { .. } => 3,
            FormatError::ChecksumMismatch { .. } => 4,
            FormatError::TrailingBytes(_) => 5,
            FormatError::InvalidField(_) => 6,
        }
    }
}

/// Errors raised by the range coder.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodingError {
    #[error("symbol {0} does not fit the 16-bit escape literal")]
    LiteralOverflow(i32),
    #[error("truncated payload: decoder read {read} bytes past the end")]
    TruncatedPayload { read: usize },
    #[error("table has {table} channels, latent has {latent}")]
    ChannelMismatch { table: usize, latent: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
