//! Dense 3D grids with physical spacing.
//!
//! Data is stored channel-major with z varying fastest inside a channel, so
//! the linear index of `(c, x, y, z)` is `c * nvox + (x * ny + y) * nz + z`.
//! All sampling uses clamp-to-edge at the grid border.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent along (x, y, z).
pub type Dims = [usize; 3];

/// What the values of a [`Volume`] mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeKind {
    ScalarImage,
    LabelMap,
    FeatureMap,
    VectorField,
}

impl VolumeKind {
    pub fn name(self) -> &'static str {
        match self {
            VolumeKind::ScalarImage => "scalar-image",
            VolumeKind::LabelMap => "label-map",
            VolumeKind::FeatureMap => "feature-map",
            VolumeKind::VectorField => "vector-field",
        }
    }
}

/// Multi-channel scalar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    channels: usize,
    kind: VolumeKind,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(
        dims: Dims,
        spacing: [f64; 3],
        channels: usize,
        kind: VolumeKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if channels == 0 {
            return Err(Error::InvalidVolume("channels must be at least 1".into()));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let expected = channels * dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match {} channels x {:?} = {}",
                data.len(),
                channels,
                dims,
                expected
            )));
        }
        if kind == VolumeKind::LabelMap {
            if let Some(bad) = data.iter().find(|v| !(v.fract() == 0.0 && **v >= 0.0)) {
                return Err(Error::InvalidVolume(format!(
                    "label maps hold non-negative integers, found {bad}"
                )));
            }
        }
        Ok(Self {
            dims,
            spacing,
            channels,
            kind,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: [f64; 3], channels: usize, kind: VolumeKind) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        Self::new(dims, spacing, channels, kind, vec![0.0; n])
    }

    /// Builds a volume by evaluating `f(c, x, y, z)` at every entry.
    pub fn from_fn(
        dims: Dims,
        spacing: [f64; 3],
        channels: usize,
        kind: VolumeKind,
        f: impl Fn(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * dims.iter().product::<usize>());
        for c in 0..channels {
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    for z in 0..dims[2] {
                        data.push(f(c, x, y, z));
                    }
                }
            }
        }
        Self::new(dims, spacing, channels, kind, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Values of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.num_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn voxel_coords(&self, index: usize) -> [usize; 3] {
        voxel_coords(self.dims, index)
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[c * self.num_voxels() + self.voxel_index(x, y, z)]
    }

    /// Same grid, kind and channel count with new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.channels, self.kind, data)
    }

    pub fn with_kind(self, kind: VolumeKind) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.channels, kind, self.data)
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_same_dims(&self, other: &Volume, context: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch {
                context,
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }

    /// Trilinear interpolation at a continuous voxel coordinate.
    ///
    /// Coordinates outside `[0, n - 1]` are clamped to the border. Label maps
    /// should be sampled with [`Volume::sample_nearest`] instead.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_trilinear_into(p, &mut out);
        out
    }

    pub fn sample_trilinear_into(&self, p: [f64; 3], out: &mut [f64]) {
        let w = Trilinear::new(self.dims, p);
        let n = self.num_voxels();
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = w.eval(&self.data[c * n..(c + 1) * n]);
        }
    }

    /// Analytic derivative of [`Volume::sample_trilinear`] with respect to `p`.
    ///
    /// Row `c` holds `(d/dx, d/dy, d/dz)` of channel `c`. Axes that are
    /// clamped at `p` (or have a single voxel) get a zero derivative.
    pub fn sample_gradient(&self, p: [f64; 3]) -> Vec<[f64; 3]> {
        let w = Trilinear::new(self.dims, p);
        let n = self.num_voxels();
        (0..self.channels)
            .map(|c| w.gradient(&self.data[c * n..(c + 1) * n]))
            .collect()
    }

    /// Nearest-neighbor lookup (rounding half away from zero), clamp-to-edge.
    pub fn sample_nearest(&self, p: [f64; 3]) -> Vec<f64> {
        let idx = self.nearest_index(p);
        let n = self.num_voxels();
        (0..self.channels).map(|c| self.data[c * n + idx]).collect()
    }

    #[inline]
    pub(crate) fn nearest_index(&self, p: [f64; 3]) -> usize {
        let i = nearest_axis(p[0], self.dims[0]);
        let j = nearest_axis(p[1], self.dims[1]);
        let k = nearest_axis(p[2], self.dims[2]);
        self.voxel_index(i, j, k)
    }

    /// Resamples every voxel of a `dims` output grid at `coord(x, y, z)`,
    /// using nearest-neighbor for label maps and trilinear otherwise.
    pub(crate) fn resample_with(
        &self,
        dims: Dims,
        spacing: [f64; 3],
        coord: impl Fn([usize; 3]) -> [f64; 3] + Sync,
    ) -> Result<Volume> {
        let c = self.channels;
        let n = self.num_voxels();
        let label = self.kind == VolumeKind::LabelMap;
        let data = build_channel_major(dims, c, |v, out| {
            let p = coord(voxel_coords(dims, v));
            if label {
                let idx = self.nearest_index(p);
                for (ch, o) in out.iter_mut().enumerate() {
                    *o = self.data[ch * n + idx];
                }
            } else {
                let w = Trilinear::new(self.dims, p);
                for (ch, o) in out.iter_mut().enumerate() {
                    *o = w.eval(&self.data[ch * n..(ch + 1) * n]);
                }
            }
        });
        Volume::new(dims, spacing, c, self.kind, data)
    }

    /// Resamples onto a grid of `target` dims covering the same physical
    /// extent (cell-centered alignment: voxel centers map through
    /// `s = (t + 0.5) * n_src / n_dst - 0.5`).
    pub fn resample_trilinear(&self, target: Dims) -> Result<Volume> {
        if target.iter().any(|&n| n == 0) {
            return Err(Error::InvalidVolume(format!("target dims must be positive, got {target:?}")));
        }
        let ratio = [0, 1, 2].map(|a| self.dims[a] as f64 / target[a] as f64);
        let spacing = [0, 1, 2].map(|a| self.spacing[a] * ratio[a]);
        self.resample_with(target, spacing, |[x, y, z]| {
            [
                (x as f64 + 0.5) * ratio[0] - 0.5,
                (y as f64 + 0.5) * ratio[1] - 0.5,
                (z as f64 + 0.5) * ratio[2] - 0.5,
            ]
        })
    }

    /// Halves the grid resolution (ceil), doubling the spacing.
    ///
    /// Intensity and feature volumes use 2x2x2 average pooling with the
    /// window clamped at the border; label maps keep the voxel at the even
    /// index. Singleton axes stay singleton.
    pub fn downsample_half(&self) -> Result<Volume> {
        if self.dims.iter().all(|&n| n < 2) {
            return Err(Error::DegenerateAxis {
                context: "downsample_half",
                axis: 0,
                size: self.dims[0],
            });
        }
        if self.kind == VolumeKind::VectorField {
            return Err(Error::WrongKind {
                expected: "scalar-image, label-map or feature-map",
                found: self.kind.name(),
            });
        }
        let src = self.dims;
        let dims = src.map(|n| n.div_ceil(2));
        let spacing = [0, 1, 2].map(|a| {
            if src[a] > 1 {
                self.spacing[a] * 2.0
            } else {
                self.spacing[a]
            }
        });
        let n = self.num_voxels();
        let label = self.kind == VolumeKind::LabelMap;
        let data = build_channel_major(dims, self.channels, |v, out| {
            let [x, y, z] = voxel_coords(dims, v);
            let (x0, y0, z0) = (2 * x, 2 * y, 2 * z);
            if label {
                let idx = self.voxel_index(x0, y0, z0);
                for (c, o) in out.iter_mut().enumerate() {
                    *o = self.data[c * n + idx];
                }
                return;
            }
            let x1 = (x0 + 1).min(src[0] - 1);
            let y1 = (y0 + 1).min(src[1] - 1);
            let z1 = (z0 + 1).min(src[2] - 1);
            let idx = [
                self.voxel_index(x0, y0, z0),
                self.voxel_index(x1, y0, z0),
                self.voxel_index(x0, y1, z0),
                self.voxel_index(x1, y1, z0),
                self.voxel_index(x0, y0, z1),
                self.voxel_index(x1, y0, z1),
                self.voxel_index(x0, y1, z1),
                self.voxel_index(x1, y1, z1),
            ];
            for (c, o) in out.iter_mut().enumerate() {
                let base = c * n;
                let sum: f64 = idx.iter().map(|&i| self.data[base + i]).sum();
                *o = sum / 8.0;
            }
        });
        Volume::new(dims, spacing, self.channels, self.kind, data)
    }

    /// Resamples the volume under an affine map: `out(x) = in(T^-1(x))`.
    pub fn warp_affine(&self, transform: &AffineTransform) -> Result<Volume> {
        if transform.is_identity() {
            return Ok(self.clone());
        }
        let inv = transform.inverse_matrix()?;
        let c = transform.center;
        let t = transform.translation;
        self.resample_with(self.dims, self.spacing, |[x, y, z]| {
            let q = [
                x as f64 - c[0] - t[0],
                y as f64 - c[1] - t[1],
                z as f64 - c[2] - t[2],
            ];
            let r = mat_vec(&inv, q);
            [r[0] + c[0], r[1] + c[1], r[2] + c[2]]
        })
    }
}

#[inline]
pub(crate) fn voxel_coords(dims: Dims, index: usize) -> [usize; 3] {
    let z = index % dims[2];
    let rest = index / dims[2];
    [rest / dims[1], rest % dims[1], z]
}

#[inline]
fn nearest_axis(p: f64, n: usize) -> usize {
    let r = p.round();
    if r.is_nan() || r <= 0.0 {
        0
    } else if r >= (n - 1) as f64 {
        n - 1
    } else {
        r as usize
    }
}

/// Evaluates `f(voxel, out)` in parallel, where `out` receives one value per
/// channel, and returns the result in channel-major layout.
pub(crate) fn build_channel_major(
    dims: Dims,
    channels: usize,
    f: impl Fn(usize, &mut [f64]) + Sync,
) -> Vec<f64> {
    let nvox: usize = dims.iter().product();
    let mut interleaved = vec![0.0; nvox * channels];
    interleaved
        .par_chunks_mut(channels)
        .enumerate()
        .for_each(|(v, out)| f(v, out));
    if channels == 1 {
        return interleaved;
    }
    let mut data = vec![0.0; nvox * channels];
    for (v, vals) in interleaved.chunks_exact(channels).enumerate() {
        for (c, &val) in vals.iter().enumerate() {
            data[c * nvox + v] = val;
        }
    }
    data
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

#[derive(Clone, Copy, Debug)]
struct AxisWeight {
    lo: usize,
    hi: usize,
    t: f64,
    /// False when the coordinate is clamped or the axis is a singleton.
    slope: bool,
}

#[inline]
fn axis_weight(p: f64, n: usize) -> AxisWeight {
    let top = (n - 1) as f64;
    if n == 1 || p.is_nan() || p < 0.0 {
        return AxisWeight { lo: 0, hi: 0, t: 0.0, slope: false };
    }
    if p > top {
        return AxisWeight { lo: n - 1, hi: n - 1, t: 0.0, slope: false };
    }
    let lo = (p.floor() as usize).min(n - 2);
    AxisWeight { lo, hi: lo + 1, t: p - lo as f64, slope: true }
}

/// Precomputed corner offsets and weights for one trilinear lookup.
///
/// Corner `k` has x from bit 0, y from bit 1 and z from bit 2 of `k`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Trilinear {
    offsets: [usize; 8],
    t: [f64; 3],
    slope: [bool; 3],
}

impl Trilinear {
    #[inline]
    pub(crate) fn new(dims: Dims, p: [f64; 3]) -> Self {
        let ax = axis_weight(p[0], dims[0]);
        let ay = axis_weight(p[1], dims[1]);
        let az = axis_weight(p[2], dims[2]);
        let mut offsets = [0; 8];
        for (k, o) in offsets.iter_mut().enumerate() {
            let x = if k & 1 == 0 { ax.lo } else { ax.hi };
            let y = if k & 2 == 0 { ay.lo } else { ay.hi };
            let z = if k & 4 == 0 { az.lo } else { az.hi };
            *o = (x * dims[1] + y) * dims[2] + z;
        }
        Self {
            offsets,
            t: [ax.t, ay.t, az.t],
            slope: [ax.slope, ay.slope, az.slope],
        }
    }

    #[inline]
    fn corners(&self, channel: &[f64]) -> [f64; 8] {
        self.offsets.map(|o| channel[o])
    }

    #[inline]
    pub(crate) fn eval(&self, channel: &[f64]) -> f64 {
        let v = self.corners(channel);
        let [tx, ty, tz] = self.t;
        let c00 = lerp(v[0], v[1], tx);
        let c10 = lerp(v[2], v[3], tx);
        let c01 = lerp(v[4], v[5], tx);
        let c11 = lerp(v[6], v[7], tx);
        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
    }

    #[inline]
    pub(crate) fn gradient(&self, channel: &[f64]) -> [f64; 3] {
        let v = self.corners(channel);
        let [tx, ty, tz] = self.t;
        let gx = if self.slope[0] {
            lerp(
                lerp(v[1] - v[0], v[3] - v[2], ty),
                lerp(v[5] - v[4], v[7] - v[6], ty),
                tz,
            )
        } else {
            0.0
        };
        let c00 = lerp(v[0], v[1], tx);
        let c10 = lerp(v[2], v[3], tx);
        let c01 = lerp(v[4], v[5], tx);
        let c11 = lerp(v[6], v[7], tx);
        let gy = if self.slope[1] {
            lerp(c10 - c00, c11 - c01, tz)
        } else {
            0.0
        };
        let gz = if self.slope[2] {
            lerp(c01, c11, ty) - lerp(c00, c10, ty)
        } else {
            0.0
        };
        [gx, gy, gz]
    }
}

/// Affine map about a pivot: `T(p) = M (p - center) + center + translation`,
/// all in voxel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl AffineTransform {
    pub fn new(matrix: [[f64; 3]; 3], translation: [f64; 3], center: [f64; 3]) -> Result<Self> {
        let det = det3(&matrix);
        if !(det.abs() > 1e-12) {
            return Err(Error::SingularMatrix(det));
        }
        Ok(Self { matrix, translation, center })
    }

    /// Grid center `(n - 1) / 2` along each axis.
    pub fn grid_center(dims: Dims) -> [f64; 3] {
        dims.map(|n| (n as f64 - 1.0) / 2.0)
    }

    pub fn identity(dims: Dims) -> Self {
        Self {
            matrix: IDENTITY,
            translation: [0.0; 3],
            center: Self::grid_center(dims),
        }
    }

    pub fn translation(dims: Dims, t: [f64; 3]) -> Self {
        Self {
            matrix: IDENTITY,
            translation: t,
            center: Self::grid_center(dims),
        }
    }

    /// Rotation by `angle_rad` about coordinate axis `axis` through the grid center.
    pub fn rotation(dims: Dims, axis: usize, angle_rad: f64) -> Result<Self> {
        Self::new(rotation_matrix(axis, angle_rad)?, [0.0; 3], Self::grid_center(dims))
    }

    /// `other` applied after `self`, both about `self.center`.
    ///
    /// Only valid when both transforms share a center.
    pub fn then(&self, other: &AffineTransform) -> Result<Self> {
        let matrix = mat_mul(&other.matrix, &self.matrix);
        let t = mat_vec(&other.matrix, self.translation);
        Self::new(
            matrix,
            [
                t[0] + other.translation[0],
                t[1] + other.translation[1],
                t[2] + other.translation[2],
            ],
            self.center,
        )
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r = mat_vec(&self.matrix, q);
        [0, 1, 2].map(|a| r[a] + self.center[a] + self.translation[a])
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.inverse_matrix()?;
        let t = mat_vec(&inv, self.translation);
        Self::new(inv, [-t[0], -t[1], -t[2]], self.center)
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == IDENTITY && self.translation == [0.0; 3]
    }

    fn inverse_matrix(&self) -> Result<[[f64; 3]; 3]> {
        let m = &self.matrix;
        let det = det3(m);
        if !(det.abs() > 1e-12) {
            return Err(Error::SingularMatrix(det));
        }
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        Ok([
            [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
            [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
            [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
        ])
    }
}

pub fn rotation_matrix(axis: usize, angle_rad: f64) -> Result<[[f64; 3]; 3]> {
    let (s, c) = angle_rad.sin_cos();
    match axis {
        0 => Ok([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]),
        1 => Ok([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]),
        2 => Ok([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]),
        _ => Err(Error::InvalidConfig(format!("rotation axis must be 0, 1 or 2, got {axis}"))),
    }
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}
