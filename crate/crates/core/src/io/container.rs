//! Native container: a fixed 40-byte little-endian header followed by the
//! raw channel-major payload.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CVR1"
//!      4     4  version (u32) = 1
//!      8     1  kind (0 scalar, 1 label, 2 feature, 3 vector-field)
//!      9     1  dtype (0 float32, 1 int32)
//!     10     2  reserved, zero
//!     12     4  channels (u32)
//!     16    12  dims nx, ny, nz (u32)
//!     28    12  spacing sx, sy, sz (f32, mm)
//! ```

use std::path::Path;

use super::{read_file, write_file, FormatError};
use crate::error::Result;
use crate::volume::{Volume, VolumeKind};

pub const MAGIC: &[u8; 4] = b"CVR1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    Float32,
    Int32,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::Float32 => "float32",
            Dtype::Int32 => "int32",
        }
    }
}

fn kind_code(kind: VolumeKind) -> u8 {
    match kind {
        VolumeKind::ScalarImage => 0,
        VolumeKind::LabelMap => 1,
        VolumeKind::FeatureMap => 2,
        VolumeKind::VectorField => 3,
    }
}

fn dtype_for(kind: VolumeKind) -> Dtype {
    if kind == VolumeKind::LabelMap {
        Dtype::Int32
    } else {
        Dtype::Float32
    }
}

/// Serializes a volume. Real values are rounded to `f32`; labels are `i32`.
pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let dtype = dtype_for(vol.kind());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * vol.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind_code(vol.kind()));
    out.push(match dtype {
        Dtype::Float32 => 0,
        Dtype::Int32 => 1,
    });
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(vol.channels() as u32).to_le_bytes());
    for d in vol.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in vol.spacing() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    match dtype {
        Dtype::Float32 => {
            for &v in vol.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::Int32 => {
            for &v in vol.data() {
                out.extend_from_slice(&(v as i32).to_le_bytes());
            }
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Parses a container from memory.
pub fn decode_volume(bytes: &[u8]) -> std::result::Result<Volume, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::SizeMismatch {
            field: "header",
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let kind = match bytes[8] {
        0 => VolumeKind::ScalarImage,
        1 => VolumeKind::LabelMap,
        2 => VolumeKind::FeatureMap,
        3 => VolumeKind::VectorField,
        code => return Err(FormatError::UnknownCode { field: "kind", code: code as u32 }),
    };
    let dtype = match bytes[9] {
        0 => Dtype::Float32,
        1 => Dtype::Int32,
        code => return Err(FormatError::UnknownCode { field: "dtype", code: code as u32 }),
    };
    if dtype != dtype_for(kind) {
        return Err(FormatError::KindDtypeMismatch {
            kind: kind.name(),
            dtype: dtype.name(),
        });
    }
    let channels = u32_at(bytes, 12) as usize;
    if channels == 0 {
        return Err(FormatError::InvalidField {
            field: "channels",
            detail: "must be at least 1".into(),
        });
    }
    if kind == VolumeKind::VectorField && channels != 3 {
        return Err(FormatError::InvalidField {
            field: "channels",
            detail: format!("vector fields have 3 channels, found {channels}"),
        });
    }
    let dims = [16, 20, 24].map(|o| u32_at(bytes, o) as usize);
    if let Some(d) = dims.iter().find(|&&d| d == 0) {
        return Err(FormatError::InvalidField {
            field: "dims",
            detail: format!("must be positive, found {d}"),
        });
    }
    let spacing = [28, 32, 36].map(|o| f32_at(bytes, o) as f64);
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(FormatError::InvalidField {
            field: "spacing",
            detail: format!("must be positive and finite, found {spacing:?}"),
        });
    }
    let count = (channels as u64) * dims.iter().map(|&d| d as u64).product::<u64>();
    let expected = 4 * count;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if expected != actual {
        return Err(FormatError::SizeMismatch {
            field: "payload",
            expected,
            actual,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let data: Vec<f64> = match dtype {
        Dtype::Float32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::Int32 => payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    if kind == VolumeKind::LabelMap {
        if let Some(bad) = data.iter().find(|v| **v < 0.0) {
            return Err(FormatError::InvalidField {
                field: "payload",
                detail: format!("negative label {bad}"),
            });
        }
    } else if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(FormatError::InvalidField {
            field: "payload",
            detail: format!("non-finite value {bad}"),
        });
    }
    Volume::new(dims, spacing, channels, kind, data).map_err(|e| FormatError::InvalidField {
        field: "payload",
        detail: e.to_string(),
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = read_file(path.as_ref())?;
    Ok(decode_volume(&bytes)?)
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(vol))
}
