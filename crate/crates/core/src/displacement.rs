//! Displacement-field algebra.
//!
//! A field `u` stores, per voxel of its own grid, the vector that maps a
//! target coordinate to a source coordinate: `phi^-1(x) = x + u(x)`.
//! Values are in voxel units of the field's grid.

use crate::error::{Error, Result};
use crate::volume::{build_channel_major, voxel_coords, Dims, Trilinear, Volume, VolumeKind};

/// Three-channel vector field on a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField(Volume);

impl DisplacementField {
    pub fn from_volume(volume: Volume) -> Result<Self> {
        if volume.channels() != 3 {
            return Err(Error::ChannelMismatch {
                context: "displacement field channels",
                left: volume.channels(),
                right: 3,
            });
        }
        if let Some(bad) = volume.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("displacement field holds non-finite value {bad}")));
        }
        Ok(Self(volume.with_kind(VolumeKind::VectorField)?))
    }

    pub fn zeros(dims: Dims, spacing: [f64; 3]) -> Self {
        Self(Volume::zeros(dims, spacing, 3, VolumeKind::VectorField).expect("valid zero field"))
    }

    /// Same vector at every voxel.
    pub fn constant(dims: Dims, spacing: [f64; 3], v: [f64; 3]) -> Self {
        Self::from_fn(dims, spacing, |_| v)
    }

    pub fn from_fn(dims: Dims, spacing: [f64; 3], f: impl Fn([usize; 3]) -> [f64; 3]) -> Self {
        let nvox: usize = dims.iter().product();
        let mut data = vec![0.0; 3 * nvox];
        for v in 0..nvox {
            let u = f(voxel_coords(dims, v));
            for c in 0..3 {
                data[c * nvox + v] = u[c];
            }
        }
        Self::from_volume(Volume::new(dims, spacing, 3, VolumeKind::VectorField, data).expect("valid field"))
            .expect("finite field")
    }

    pub(crate) fn from_data(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        Self::from_volume(Volume::new(dims, spacing, 3, VolumeKind::VectorField, data)?)
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.0.spacing()
    }

    pub fn num_voxels(&self) -> usize {
        self.0.num_voxels()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    /// Displacement at a voxel index.
    #[inline]
    pub fn at(&self, voxel: usize) -> [f64; 3] {
        let n = self.num_voxels();
        let d = self.0.data();
        [d[voxel], d[n + voxel], d[2 * n + voxel]]
    }

    /// Trilinear (clamp-to-edge) lookup of the field at a continuous coordinate.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let w = Trilinear::new(self.dims(), p);
        let n = self.num_voxels();
        let d = self.0.data();
        [
            w.eval(&d[..n]),
            w.eval(&d[n..2 * n]),
            w.eval(&d[2 * n..]),
        ]
    }

    /// Largest absolute component over the whole field.
    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest Euclidean vector norm over the whole field.
    pub fn max_norm(&self) -> f64 {
        (0..self.num_voxels())
            .map(|v| {
                let u = self.at(v);
                (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Componentwise scaling of every vector.
    pub fn scaled(&self, factor: f64) -> Self {
        let data = self.data().iter().map(|v| v * factor).collect();
        Self::from_data(self.dims(), self.spacing(), data).expect("finite scaling")
    }

    fn check_grid(&self, other: &DisplacementField, context: &'static str) -> Result<()> {
        self.0.check_same_dims(&other.0, context)
    }

    /// Warps a volume: `out(x) = vol(x + u(x))`.
    ///
    /// Label maps use nearest-neighbor lookup, everything else trilinear.
    pub fn warp(&self, vol: &Volume) -> Result<Volume> {
        self.0.check_same_dims(vol, "warp: field vs volume")?;
        vol.resample_with(vol.dims(), vol.spacing(), |[x, y, z]| {
            let u = self.at(self.0.voxel_index(x, y, z));
            [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]
        })
    }

    /// Composition where `self` is the earlier (outer) field and `inner` the
    /// later refinement: `r(x) = inner(x) + self(x + inner(x))`.
    ///
    /// Warping with `r` equals warping with `self` first and then `inner`.
    pub fn compose(&self, inner: &DisplacementField) -> Result<DisplacementField> {
        self.check_grid(inner, "compose: outer vs inner")?;
        let dims = self.dims();
        let data = build_channel_major(dims, 3, |v, out| {
            let [x, y, z] = voxel_coords(dims, v);
            let d = inner.at(v);
            let o = self.sample([x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]);
            for c in 0..3 {
                out[c] = d[c] + o[c];
            }
        });
        Self::from_data(dims, self.spacing(), data)
    }

    /// Resamples onto a grid of twice the resolution and doubles the vectors.
    ///
    /// `target` must be within one voxel of `2 * dims` on every axis.
    pub fn upsample2x(&self, target: Dims) -> Result<DisplacementField> {
        let src = self.dims();
        for a in 0..3 {
            if target[a].abs_diff(2 * src[a]) > 1 || target[a] == 0 {
                return Err(Error::DimensionMismatch {
                    context: "upsample2x: target must be about twice the source",
                    left: src,
                    right: target,
                });
            }
        }
        let up = self.0.resample_trilinear(target)?;
        let data = up.data().iter().map(|v| v * 2.0).collect();
        Self::from_data(target, up.spacing(), data)
    }

    /// Per-voxel `det(I + grad u)` with central differences (one-sided at the
    /// border), in voxel units.
    pub fn jacobian_determinant(&self) -> Result<Volume> {
        let dims = self.dims();
        if let Some(axis) = (0..3).find(|&a| dims[a] < 3) {
            return Err(Error::DegenerateAxis {
                context: "jacobian_determinant needs at least 3 voxels per axis",
                axis,
                size: dims[axis],
            });
        }
        let data = build_channel_major(dims, 1, |v, out| {
            let g = self.spatial_gradient(voxel_coords(dims, v));
            let m = [
                [1.0 + g[0][0], g[0][1], g[0][2]],
                [g[1][0], 1.0 + g[1][1], g[1][2]],
                [g[2][0], g[2][1], 1.0 + g[2][2]],
            ];
            out[0] = crate::volume::det3(&m);
        });
        Volume::new(dims, self.spacing(), 1, VolumeKind::ScalarImage, data)
    }

    /// `g[c][a] = d u_c / d x_a` at a voxel.
    fn spatial_gradient(&self, p: [usize; 3]) -> [[f64; 3]; 3] {
        let dims = self.dims();
        let n = self.num_voxels();
        let d = self.data();
        let mut g = [[0.0; 3]; 3];
        for a in 0..3 {
            let (lo, hi, span) = if p[a] == 0 {
                (0, 1, 1.0)
            } else if p[a] == dims[a] - 1 {
                (p[a] - 1, p[a], 1.0)
            } else {
                (p[a] - 1, p[a] + 1, 2.0)
            };
            let mut ql = p;
            let mut qh = p;
            ql[a] = lo;
            qh[a] = hi;
            let il = (ql[0] * dims[1] + ql[1]) * dims[2] + ql[2];
            let ih = (qh[0] * dims[1] + qh[1]) * dims[2] + qh[2];
            for (c, row) in g.iter_mut().enumerate() {
                row[a] = (d[c * n + ih] - d[c * n + il]) / span;
            }
        }
        g
    }
}
