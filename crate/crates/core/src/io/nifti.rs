//! Minimal single-file NIfTI-1 support.
//!
//! Reads uncompressed little-endian `.nii` files holding a 3D int16 or
//! float32 volume; writes float32. Orientation fields are carried along as
//! metadata and never used for resampling.

use std::path::Path;

use super::{read_file, write_file, FormatError};
use crate::error::Result;
use crate::volume::{Volume, VolumeKind};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Orientation metadata copied from the header.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiOrientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl NiftiOrientation {
    /// Axis-aligned scanner frame with the given spacing.
    pub fn aligned(spacing: [f64; 3]) -> Self {
        let mut srow = [[0.0f32; 4]; 3];
        for (a, row) in srow.iter_mut().enumerate() {
            row[a] = spacing[a] as f32;
        }
        Self {
            qform_code: 0,
            sform_code: 2,
            qfac: 1.0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub volume: Volume,
    pub orientation: NiftiOrientation,
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn i16(&self, o: usize) -> i16 {
        i16::from_le_bytes([self.0[o], self.0[o + 1]])
    }
    fn i32(&self, o: usize) -> i32 {
        i32::from_le_bytes(self.0[o..o + 4].try_into().expect("4 bytes"))
    }
    fn f32(&self, o: usize) -> f32 {
        f32::from_le_bytes(self.0[o..o + 4].try_into().expect("4 bytes"))
    }
}

fn unsupported(field: &'static str, detail: impl Into<String>) -> FormatError {
    FormatError::UnsupportedNifti {
        field,
        detail: detail.into(),
    }
}

/// Parses a NIfTI-1 image from memory.
pub fn decode_nifti(bytes: &[u8]) -> std::result::Result<NiftiImage, FormatError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(unsupported("compression", "gzip-compressed files are not supported"));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(FormatError::SizeMismatch {
            field: "header",
            expected: HEADER_SIZE as u64,
            actual: bytes.len() as u64,
        });
    }
    let r = Reader(bytes);
    let sizeof_hdr = r.i32(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(unsupported("sizeof_hdr", "big-endian files are not supported"));
        }
        if sizeof_hdr == 540 {
            return Err(unsupported("sizeof_hdr", "NIfTI-2 is not supported"));
        }
        return Err(FormatError::InvalidField {
            field: "sizeof_hdr",
            detail: format!("expected 348, found {sizeof_hdr}"),
        });
    }
    let magic = &bytes[344..348];
    if magic == b"ni1\0" {
        return Err(unsupported("magic", "split .hdr/.img pairs are not supported"));
    }
    if magic != b"n+1\0" {
        return Err(FormatError::BadMagic {
            expected: "n+1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) {
        return Err(unsupported("dim", format!("only 3D volumes are supported, dim[0] = {ndim}")));
    }
    if dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(unsupported("dim", format!("4D and higher volumes are not supported, dim = {dim:?}")));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(FormatError::InvalidField {
            field: "dim",
            detail: format!("spatial dims must be positive, found {:?}", &dim[1..4]),
        });
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let datatype = r.i16(70);
    let bytes_per = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(unsupported("datatype", format!("datatype code {other} (only int16 and float32)"))),
    };
    let pixdim: Vec<f32> = (0..8).map(|i| r.f32(76 + 4 * i)).collect();
    let spacing = [1, 2, 3].map(|i| pixdim[i].abs() as f64);
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(FormatError::InvalidField {
            field: "pixdim",
            detail: format!("spacing must be positive, found {:?}", &pixdim[1..4]),
        });
    }
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(FormatError::InvalidField {
            field: "vox_offset",
            detail: format!("must be at least 348 for single-file images, found {vox_offset}"),
        });
    }
    let offset = vox_offset as usize;
    let nvox = dims.iter().product::<usize>();
    let expected = (offset + nvox * bytes_per) as u64;
    if bytes.len() as u64 != expected {
        return Err(FormatError::SizeMismatch {
            field: "voxel data",
            expected,
            actual: bytes.len() as u64,
        });
    }
    let slope = r.f32(112);
    let inter = r.f32(116);
    let scale = |v: f64| {
        if slope != 0.0 && slope.is_finite() {
            v * slope as f64 + if inter.is_finite() { inter as f64 } else { 0.0 }
        } else {
            v
        }
    };
    let raw = &bytes[offset..];
    let mut data = vec![0.0; nvox];
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let v = match datatype {
                    DT_INT16 => i16::from_le_bytes([raw[2 * i], raw[2 * i + 1]]) as f64,
                    _ => f32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64,
                };
                data[(x * ny + y) * nz + z] = scale(v);
            }
        }
    }
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(FormatError::InvalidField {
            field: "voxel data",
            detail: format!("non-finite value {bad}"),
        });
    }
    let volume = Volume::new(dims, spacing, 1, VolumeKind::ScalarImage, data).map_err(|e| FormatError::InvalidField {
        field: "voxel data",
        detail: e.to_string(),
    })?;
    let orientation = NiftiOrientation {
        qform_code: r.i16(252),
        sform_code: r.i16(254),
        qfac: if pixdim[0] < 0.0 { -1.0 } else { 1.0 },
        quatern: [r.f32(256), r.f32(260), r.f32(264)],
        qoffset: [r.f32(268), r.f32(272), r.f32(276)],
        srow: [0, 1, 2].map(|row| [0, 1, 2, 3].map(|c| r.f32(280 + 16 * row + 4 * c))),
    };
    Ok(NiftiImage { volume, orientation })
}

/// Serializes a single-channel volume as float32 NIfTI-1.
pub fn encode_nifti(image: &NiftiImage) -> std::result::Result<Vec<u8>, FormatError> {
    let vol = &image.volume;
    if vol.channels() != 1 {
        return Err(unsupported("dim", format!("only single-channel volumes, found {} channels", vol.channels())));
    }
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(FormatError::InvalidField {
            field: "dim",
            detail: format!("dims {dims:?} exceed the int16 range"),
        });
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    let o = &image.orientation;
    let spacing = vol.spacing();
    let pixdim = [o.qfac, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // millimeters
    put_i16(&mut h, 252, o.qform_code);
    put_i16(&mut h, 254, o.sform_code);
    for i in 0..3 {
        put_f32(&mut h, 256 + 4 * i, o.quatern[i]);
        put_f32(&mut h, 268 + 4 * i, o.qoffset[i]);
    }
    for (row, vals) in o.srow.iter().enumerate() {
        for (c, v) in vals.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * row + 4 * c, *v);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let [nx, ny, nz] = dims;
    h.reserve(4 * nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                h.extend_from_slice(&(vol.get(0, x, y, z) as f32).to_le_bytes());
            }
        }
    }
    Ok(h)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let bytes = read_file(path.as_ref())?;
    Ok(decode_nifti(&bytes)?)
}

/// Writes a volume with an axis-aligned orientation.
pub fn write_nifti(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let image = NiftiImage {
        volume: vol.clone(),
        orientation: NiftiOrientation::aligned(vol.spacing()),
    };
    write_file(path.as_ref(), &encode_nifti(&image)?)
}
