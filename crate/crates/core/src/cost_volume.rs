//! Dense correlation volumes over a cubic displacement search window.
//!
//! `value(x, d) = <f_fix(x), f_mov(x + d)>` for every integer `d` in
//! `[-N, N]^3`, with `x + d` clamped to the grid. Higher means better
//! alignment. Candidates of one voxel are stored contiguously in
//! lexicographic order of `d`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::volume::{voxel_coords, Dims};

/// Largest radius accepted in materialized mode ((2*8+1)^3 = 4913 values per voxel).
pub const MAX_MATERIALIZED_RADIUS: usize = 8;

/// Half-width `N` of the displacement search window, in feature voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchRadius(pub usize);

impl SearchRadius {
    pub fn get(self) -> usize {
        self.0
    }

    /// Candidates per axis, `2N + 1`.
    pub fn side(self) -> usize {
        2 * self.0 + 1
    }

    pub fn num_candidates(self) -> usize {
        self.side().pow(3)
    }

    /// Displacement of candidate `k`.
    #[inline]
    pub fn unrank(self, k: usize) -> [isize; 3] {
        let s = self.side();
        let n = self.0 as isize;
        [(k / (s * s)) as isize - n, ((k / s) % s) as isize - n, (k % s) as isize - n]
    }

    /// Candidate index of displacement `d`; `None` outside the window.
    #[inline]
    pub fn rank(self, d: [isize; 3]) -> Option<usize> {
        let n = self.0 as isize;
        if d.iter().any(|v| v.abs() > n) {
            return None;
        }
        let s = self.side();
        let i = d.map(|v| (v + n) as usize);
        Some((i[0] * s + i[1]) * s + i[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    Materialized,
    Streaming,
}

#[derive(Clone, Debug)]
enum Storage {
    Materialized(Vec<f32>),
    Streaming { fix: Vec<f64>, mov: Vec<f64> },
}

/// Similarity of every voxel against every displacement candidate.
#[derive(Clone, Debug)]
pub struct CostVolume {
    radius: SearchRadius,
    dims: Dims,
    channels: usize,
    storage: Storage,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f32 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s as f32
}

#[inline]
fn clamp_axis(p: usize, d: isize, n: usize) -> usize {
    (p as isize + d).clamp(0, n as isize - 1) as usize
}

/// Materialized cost volume; see [`build_cost_volume_with_mode`].
pub fn build_cost_volume(f_fix: &FeatureVolume, f_mov: &FeatureVolume, radius: SearchRadius) -> Result<CostVolume> {
    build_cost_volume_with_mode(f_fix, f_mov, radius, CostMode::Materialized)
}

/// Builds the correlation volume of `f_fix` (target) against `f_mov`
/// (warped source).
pub fn build_cost_volume_with_mode(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    radius: SearchRadius,
    mode: CostMode,
) -> Result<CostVolume> {
    f_fix.check_compatible(f_mov, "cost volume: fixed vs moving features")?;
    if mode == CostMode::Materialized && radius.get() > MAX_MATERIALIZED_RADIUS {
        return Err(Error::RadiusTooLarge {
            radius: radius.get(),
            max: MAX_MATERIALIZED_RADIUS,
        });
    }
    let dims = f_fix.dims();
    let channels = f_fix.channels();
    let fix = f_fix.interleaved();
    let mov = f_mov.interleaved();
    let storage = match mode {
        CostMode::Streaming => Storage::Streaming { fix, mov },
        CostMode::Materialized => {
            let k = radius.num_candidates();
            let nvox: usize = dims.iter().product();
            let mut values = vec![0.0f32; nvox * k];
            values.par_chunks_mut(k).enumerate().for_each(|(v, row)| {
                fill_row(&fix, &mov, dims, channels, radius, v, row);
            });
            Storage::Materialized(values)
        }
    };
    Ok(CostVolume {
        radius,
        dims,
        channels,
        storage,
    })
}

fn fill_row(fix: &[f64], mov: &[f64], dims: Dims, channels: usize, radius: SearchRadius, voxel: usize, row: &mut [f32]) {
    let [x, y, z] = voxel_coords(dims, voxel);
    let a = &fix[voxel * channels..(voxel + 1) * channels];
    let n = radius.get() as isize;
    let mut k = 0;
    for dx in -n..=n {
        let cx = clamp_axis(x, dx, dims[0]);
        for dy in -n..=n {
            let cy = clamp_axis(y, dy, dims[1]);
            let base = (cx * dims[1] + cy) * dims[2];
            for dz in -n..=n {
                let m = base + clamp_axis(z, dz, dims[2]);
                row[k] = dot(a, &mov[m * channels..(m + 1) * channels]);
                k += 1;
            }
        }
    }
}

impl CostVolume {
    pub fn radius(&self) -> SearchRadius {
        self.radius
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn mode(&self) -> CostMode {
        match self.storage {
            Storage::Materialized(_) => CostMode::Materialized,
            Storage::Streaming { .. } => CostMode::Streaming,
        }
    }

    /// All values, candidate-major per voxel (materialized mode only).
    pub fn values(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::Materialized(v) => Some(v),
            Storage::Streaming { .. } => None,
        }
    }

    /// Similarity of `voxel` at candidate `k`.
    pub fn value(&self, voxel: usize, k: usize) -> f32 {
        let kk = self.radius.num_candidates();
        match &self.storage {
            Storage::Materialized(v) => v[voxel * kk + k],
            Storage::Streaming { fix, mov } => {
                let [x, y, z] = voxel_coords(self.dims, voxel);
                let d = self.radius.unrank(k);
                let m = (clamp_axis(x, d[0], self.dims[0]) * self.dims[1] + clamp_axis(y, d[1], self.dims[1]))
                    * self.dims[2]
                    + clamp_axis(z, d[2], self.dims[2]);
                let c = self.channels;
                dot(&fix[voxel * c..(voxel + 1) * c], &mov[m * c..(m + 1) * c])
            }
        }
    }

    /// All candidates of `voxel`; streaming mode computes them into `buf`.
    pub fn row<'a>(&'a self, voxel: usize, buf: &'a mut Vec<f32>) -> &'a [f32] {
        let k = self.radius.num_candidates();
        match &self.storage {
            Storage::Materialized(v) => &v[voxel * k..(voxel + 1) * k],
            Storage::Streaming { fix, mov } => {
                buf.resize(k, 0.0);
                fill_row(fix, mov, self.dims, self.channels, self.radius, voxel, buf);
                &buf[..]
            }
        }
    }
}

/// One similarity value computed directly from the feature volumes.
///
/// Bit-identical to the corresponding entry of a materialized volume.
pub fn stream_candidate(f_fix: &FeatureVolume, f_mov: &FeatureVolume, x: [usize; 3], d: [isize; 3]) -> f32 {
    let dims = f_fix.dims();
    let fv = f_fix.volume();
    let mv = f_mov.volume();
    let n = fv.num_voxels();
    let v = fv.voxel_index(x[0], x[1], x[2]);
    let m = mv.voxel_index(
        clamp_axis(x[0], d[0], dims[0]),
        clamp_axis(x[1], d[1], dims[1]),
        clamp_axis(x[2], d[2], dims[2]),
    );
    let (a, b) = (fv.data(), mv.data());
    let mut s = 0.0f64;
    for c in 0..f_fix.channels() {
        s += a[c * n + v] * b[c * n + m];
    }
    s as f32
}
