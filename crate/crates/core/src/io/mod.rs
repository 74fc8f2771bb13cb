//! On-disk formats: NTSR1 tensor blobs, IDX datasets, PPM images.

mod idx;
mod ntsr1;
mod ppm;

pub use idx::{read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use ntsr1::{read_ntsr1, read_ntsr1_dtype, write_ntsr1, AnyTensor};
pub use ppm::write_ppm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoFormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("{path}: stored dtype {stored} does not match requested {requested}")]
    DtypeMismatch {
        path: String,
        stored: &'static str,
        requested: &'static str,
    },
}

impl IoFormatError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        IoFormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn malformed(path: &std::path::Path, reason: impl Into<String>) -> Self {
        IoFormatError::Malformed {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}
