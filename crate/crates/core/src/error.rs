use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inputs whose shapes do not fit together (length mismatch, empty payload).
    #[error("structural error: {0}")]
    Structural(String),

    /// A numeric parameter outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("parity error in byte {index}")]
    Parity { index: usize },

    #[error("CRC_A mismatch: expected {expected:04x}, found {found:04x}")]
    Crc { expected: u16, found: u16 },

    #[error("framing error: {0}")]
    Framing(String),

    /// No recognizable line-code pattern at the given bit position.
    #[error("demodulation failed at bit {position}")]
    Demod { position: usize },

    #[error("no field activation found")]
    FieldNotFound,

    #[error("no message segments found")]
    SegmentationEmpty,

    #[error("i/o error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
