use std::path::PathBuf;

/// Errors produced by tensor construction, file IO, and the normalization
/// and analysis operations.
///
/// The CLI maps these onto process exit codes: `SingularSpectrum` is a
/// domain error (exit 1); everything else is a usage or format error
/// (exit 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape violates the tensor contract (rank 0 or > 4, zero extent,
    /// or data length not matching the product of extents).
    #[error("bad shape: {0}")]
    Shape(String),

    /// An operation was called with arguments outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A tensor value is NaN or infinite. `index` is the row-major flat
    /// index of the first offending value.
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    /// A file does not decode as the CNT1 tensor format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// The combined kernel magnitude spectrum of `channel` vanishes at
    /// `freq_index` (row-major index into the frequency grid) and eps is
    /// zero, so the inverse square root does not exist.
    #[error(
        "singular spectrum: output channel {channel} has zero combined magnitude \
         at frequency index {freq_index} and eps = 0"
    )]
    SingularSpectrum { channel: usize, freq_index: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
