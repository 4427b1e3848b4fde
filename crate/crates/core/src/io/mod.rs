//! On-disk formats: the native `CVR1` volume container and minimal NIfTI-1.

mod container;
mod nifti;

pub use container::{decode_volume, encode_volume, read_volume, write_volume, HEADER_LEN, MAGIC, VERSION};
pub use nifti::{decode_nifti, encode_nifti, read_nifti, write_nifti, NiftiImage, NiftiOrientation};

use std::path::Path;

use thiserror::Error;

use crate::error::Result;
use crate::volume::Volume;

/// Decoding failures. Each variant has a stable [`FormatError::code`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("size mismatch in {field}: expected {expected} bytes, found {actual} bytes")]
    SizeMismatch {
        field: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("unknown {field} code {code}")]
    UnknownCode { field: &'static str, code: u32 },

    #[error("dtype/kind inconsistency: kind {kind} cannot be stored as {dtype}")]
    KindDtypeMismatch { kind: &'static str, dtype: &'static str },

    #[error("invalid header field {field}: {detail}")]
    InvalidField { field: &'static str, detail: String },

    #[error("unsupported NIfTI feature: {field}: {detail}")]
    UnsupportedNifti { field: &'static str, detail: String },
}

impl FormatError {
    /// Stable short identifier for scripts and tests.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::VersionMismatch { .. } => "version-mismatch",
            FormatError::SizeMismatch { .. } => "size-mismatch",
            FormatError::UnknownCode { .. } => "unknown-code",
            FormatError::KindDtypeMismatch { .. } => "kind-dtype-mismatch",
            FormatError::InvalidField { .. } => "invalid-field",
            FormatError::UnsupportedNifti { .. } => "unsupported-nifti",
        }
    }
}

fn has_nifti_extension(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Reads a native container, or NIfTI-1 when the name ends in `.nii`.
pub fn load_any(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if has_nifti_extension(path) {
        Ok(read_nifti(path)?.volume)
    } else {
        read_volume(path)
    }
}

/// Writes a native container, or NIfTI-1 when the name ends in `.nii`.
pub fn save_any(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    if has_nifti_extension(path) {
        write_nifti(path, vol)
    } else {
        write_volume(path, vol)
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| crate::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| crate::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
