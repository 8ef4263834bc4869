//! On-disk formats: the binary adapter file, matrix files, metrics output.

pub mod adapter_file;
pub mod matrix_file;
pub mod metrics;

use thiserror::Error;

use crate::adapter::AdapterError;
use crate::linalg::LinalgError;

pub use adapter_file::{
    compact_file_len, full_file_len, load_adapter, read_header, read_header_unverified,
    save_adapter, save_adapter_with, verify_crc, AdapterHeader, Precision, SaveMode,
};
pub use matrix_file::{
    read_matrix, read_matrix_file, write_matrix_binary, write_matrix_text, MatrixEncoding,
};
pub use metrics::{write_metrics, MetricsRecord};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("compact adapter requires the base weight matrix")]
    MissingBase,
    #[error("base weight does not match adapter: {0}")]
    BaseMismatch(String),
    #[error("unknown init method tag {0}")]
    BadInitTag(u8),
    #[error("truncated input: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload length {got} does not match header (expected {expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}
