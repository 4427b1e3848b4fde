//! Per-voxel feature descriptors.
//!
//! Three providers produce [`FeatureVolume`]s: z-scored raw intensity, a
//! self-similarity descriptor over the six axis neighbors, and precomputed
//! embeddings read from disk (optionally a coarse global embedding fused with
//! a fine local one).

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::displacement::DisplacementField;
use crate::error::{Error, Result};
use crate::io;
use crate::volume::{Dims, Volume, VolumeKind};

/// Tolerance on per-voxel norms of normalized features.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// Descriptor grid plus the channel partition used for normalization.
///
/// `parts` lists consecutive channel groups; when `normalized` is set, every
/// group of every voxel has unit L2 norm (or is all zero). Fused global+local
/// features have two parts, so their self-similarity is 2.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    volume: Volume,
    parts: Vec<usize>,
    normalized: bool,
}

impl FeatureVolume {
    /// Wraps a feature-map volume as a single unnormalized part.
    pub fn raw(volume: Volume) -> Result<Self> {
        if volume.kind() != VolumeKind::FeatureMap {
            return Err(Error::WrongKind {
                expected: VolumeKind::FeatureMap.name(),
                found: volume.kind().name(),
            });
        }
        let parts = vec![volume.channels()];
        Ok(Self {
            volume,
            parts,
            normalized: false,
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn into_volume(self) -> Volume {
        self.volume
    }

    pub fn dims(&self) -> Dims {
        self.volume.dims()
    }

    pub fn channels(&self) -> usize {
        self.volume.channels()
    }

    pub fn parts(&self) -> &[usize] {
        &self.parts
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Per-voxel L2 normalization of each part; all-zero vectors stay zero.
    pub fn normalized(&self) -> FeatureVolume {
        let n = self.volume.num_voxels();
        let src = self.volume.data();
        let mut data = src.to_vec();
        let mut start = 0;
        for &len in &self.parts {
            let range = start..start + len;
            // Column-wise over voxels; channels of a part are strided by n.
            let norms: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|v| range.clone().map(|c| src[c * n + v].powi(2)).sum::<f64>().sqrt())
                .collect();
            for c in range {
                for (v, &norm) in norms.iter().enumerate() {
                    if norm > 0.0 {
                        data[c * n + v] = src[c * n + v] / norm;
                    }
                }
            }
            start += len;
        }
        FeatureVolume {
            volume: self.volume.with_data(data).expect("same shape"),
            parts: self.parts.clone(),
            normalized: true,
        }
    }

    /// Average-pooled to half resolution, renormalized when normalized.
    pub fn downsample_half(&self) -> Result<FeatureVolume> {
        let fv = FeatureVolume {
            volume: self.volume.downsample_half()?,
            parts: self.parts.clone(),
            normalized: false,
        };
        Ok(if self.normalized { fv.normalized() } else { fv })
    }

    /// Warps the descriptor grid directly (used when features cannot be
    /// re-extracted from a warped image), renormalizing afterwards.
    pub fn warped(&self, u: &DisplacementField) -> Result<FeatureVolume> {
        let fv = FeatureVolume {
            volume: u.warp(&self.volume)?,
            parts: self.parts.clone(),
            normalized: false,
        };
        Ok(if self.normalized { fv.normalized() } else { fv })
    }

    /// Affine-resampled descriptor grid, renormalized when normalized.
    pub fn warp_affine(&self, a: &crate::volume::AffineTransform) -> Result<FeatureVolume> {
        let fv = FeatureVolume {
            volume: self.volume.warp_affine(a)?,
            parts: self.parts.clone(),
            normalized: false,
        };
        Ok(if self.normalized { fv.normalized() } else { fv })
    }

    /// Channels of each voxel stored contiguously (`v * C + c`).
    pub(crate) fn interleaved(&self) -> Vec<f64> {
        let n = self.volume.num_voxels();
        let c = self.channels();
        let src = self.volume.data();
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            for v in 0..n {
                out[v * c + ch] = src[ch * n + v];
            }
        }
        out
    }

    pub(crate) fn check_compatible(&self, other: &FeatureVolume, context: &'static str) -> Result<()> {
        self.volume.check_same_dims(&other.volume, context)?;
        if self.channels() != other.channels() {
            return Err(Error::ChannelMismatch {
                context,
                left: self.channels(),
                right: other.channels(),
            });
        }
        Ok(())
    }
}

fn require_scalar(vol: &Volume) -> Result<()> {
    if vol.kind() != VolumeKind::ScalarImage || vol.channels() != 1 {
        return Err(Error::WrongKind {
            expected: "single-channel scalar-image",
            found: vol.kind().name(),
        });
    }
    Ok(())
}

/// Z-scored intensities as a single unnormalized channel.
pub fn extract_intensity(vol: &Volume) -> Result<FeatureVolume> {
    require_scalar(vol)?;
    let data = vol.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        return Err(Error::ConstantImage);
    }
    let z = data.iter().map(|v| (v - mean) / std).collect();
    let volume = Volume::new(vol.dims(), vol.spacing(), 1, VolumeKind::FeatureMap, z)?;
    FeatureVolume::raw(volume)
}

/// Settings of the six-neighbor self-similarity descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsdConfig {
    pub patch_radius: usize,
    pub epsilon: f64,
}

impl Default for SsdConfig {
    fn default() -> Self {
        Self {
            patch_radius: 1,
            epsilon: 1e-6,
        }
    }
}

/// The six unit offsets, in channel order.
pub const SSD_OFFSETS: [[isize; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// Self-similarity descriptor with six channels.
///
/// For each offset `r`, `D_r(x)` sums `(I(x+q) - I(x+r+q))^2` over the
/// `(2p+1)^3` patch (clamp-to-edge lookups). The channel is
/// `exp(-D_r / (V + eps))` with `V` the mean of the six distances, followed
/// by per-voxel L2 normalization.
pub fn extract_ssd_descriptor(vol: &Volume, cfg: &SsdConfig) -> Result<FeatureVolume> {
    require_scalar(vol)?;
    let p = cfg.patch_radius;
    let dims = vol.dims();
    if let Some(axis) = (0..3).find(|&a| dims[a] < 2 * p + 3) {
        return Err(Error::DegenerateAxis {
            context: "ssd descriptor needs at least 2 * patch_radius + 3 voxels per axis",
            axis,
            size: dims[axis],
        });
    }
    let nvox = vol.num_voxels();
    let img = vol.data();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let padded = dims.map(|n| n + 2 * p);
    let w = 2 * p + 1;

    let distances: Vec<Vec<f64>> = SSD_OFFSETS
        .par_iter()
        .map(|r| {
            // Squared differences on the grid extended by p on every side.
            let mut sq = vec![0.0; padded.iter().product()];
            for px in 0..padded[0] {
                let x = px as isize - p as isize;
                let (xa, xb) = (clamp(x, dims[0]), clamp(x + r[0], dims[0]));
                for py in 0..padded[1] {
                    let y = py as isize - p as isize;
                    let (ya, yb) = (clamp(y, dims[1]), clamp(y + r[1], dims[1]));
                    let row = (px * padded[1] + py) * padded[2];
                    for pz in 0..padded[2] {
                        let z = pz as isize - p as isize;
                        let (za, zb) = (clamp(z, dims[2]), clamp(z + r[2], dims[2]));
                        let a = img[(xa * dims[1] + ya) * dims[2] + za];
                        let b = img[(xb * dims[1] + yb) * dims[2] + zb];
                        sq[row + pz] = (a - b) * (a - b);
                    }
                }
            }
            box_sum_valid(&sq, padded, w)
        })
        .collect();

    let mut data = vec![0.0; 6 * nvox];
    for v in 0..nvox {
        let mean = distances.iter().map(|d| d[v]).sum::<f64>() / 6.0;
        let denom = mean + cfg.epsilon;
        let mut norm2 = 0.0;
        let mut f = [0.0; 6];
        for (k, d) in distances.iter().enumerate() {
            f[k] = (-d[v] / denom).exp();
            norm2 += f[k] * f[k];
        }
        let norm = norm2.sqrt();
        for k in 0..6 {
            data[k * nvox + v] = f[k] / norm;
        }
    }
    let volume = Volume::new(dims, vol.spacing(), 6, VolumeKind::FeatureMap, data)?;
    Ok(FeatureVolume {
        volume,
        parts: vec![6],
        normalized: true,
    })
}

/// Sums over a `w^3` window, keeping only fully covered positions: a grid of
/// `padded` dims shrinks by `w - 1` along every axis.
fn box_sum_valid(src: &[f64], padded: Dims, w: usize) -> Vec<f64> {
    let out = padded.map(|n| n + 1 - w);
    // Along x.
    let mut a = vec![0.0; out[0] * padded[1] * padded[2]];
    let plane = padded[1] * padded[2];
    for x in 0..out[0] {
        for k in 0..w {
            let s = &src[(x + k) * plane..(x + k + 1) * plane];
            let d = &mut a[x * plane..(x + 1) * plane];
            for (o, i) in d.iter_mut().zip(s) {
                *o += i;
            }
        }
    }
    // Along y.
    let mut b = vec![0.0; out[0] * out[1] * padded[2]];
    for x in 0..out[0] {
        for y in 0..out[1] {
            let dst = (x * out[1] + y) * padded[2];
            for k in 0..w {
                let s = (x * padded[1] + y + k) * padded[2];
                for z in 0..padded[2] {
                    b[dst + z] += a[s + z];
                }
            }
        }
    }
    // Along z.
    let mut c = vec![0.0; out[0] * out[1] * out[2]];
    for xy in 0..out[0] * out[1] {
        let s = &b[xy * padded[2]..(xy + 1) * padded[2]];
        for z in 0..out[2] {
            c[xy * out[2] + z] = s[z..z + w].iter().sum();
        }
    }
    c
}

/// Reads an embedding file; the result is left unnormalized.
pub fn load_embedding(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    let vol = io::read_volume(path)?;
    FeatureVolume::raw(vol)
}

/// Resamples the global embedding onto the local grid, normalizes both per
/// voxel and concatenates them (global channels first).
///
/// The fused similarity is the sum of two cosines and lies in `[-2, 2]`.
pub fn fuse_global_local(global: &FeatureVolume, local: &FeatureVolume) -> Result<FeatureVolume> {
    let (g, l) = (global.dims(), local.dims());
    if (0..3).any(|a| g[a] > l[a]) {
        return Err(Error::DimensionMismatch {
            context: "fuse_global_local: global grid larger than local grid",
            left: g,
            right: l,
        });
    }
    let resampled = if g == l {
        global.volume.clone()
    } else {
        global.volume.resample_trilinear(l)?
    };
    let gn = FeatureVolume {
        volume: resampled,
        parts: vec![global.channels()],
        normalized: false,
    }
    .normalized();
    let ln = FeatureVolume {
        volume: local.volume.clone(),
        parts: vec![local.channels()],
        normalized: false,
    }
    .normalized();
    let mut data = gn.volume.into_data();
    data.extend_from_slice(ln.volume.data());
    let channels = global.channels() + local.channels();
    let volume = Volume::new(l, local.volume.spacing(), channels, VolumeKind::FeatureMap, data)?;
    Ok(FeatureVolume {
        volume,
        parts: vec![global.channels(), local.channels()],
        normalized: true,
    })
}

/// Embedding files for one image: a local grid and an optional global grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSource {
    pub local: PathBuf,
    pub global: Option<PathBuf>,
}

impl EmbeddingSource {
    /// Loads and normalizes (fusing with the global part when present).
    pub fn load(&self) -> Result<FeatureVolume> {
        let local = load_embedding(&self.local)?;
        match &self.global {
            Some(g) => fuse_global_local(&load_embedding(g)?, &local),
            None => Ok(local.normalized()),
        }
    }
}

/// Which descriptor a registration or landscape run uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "kebab-case")]
pub enum FeatureProviderConfig {
    Intensity,
    SsdDescriptor(SsdConfig),
    /// Precomputed embeddings for the fixed and the moving image.
    Embedded {
        fixed: EmbeddingSource,
        moving: EmbeddingSource,
    },
}

impl Default for FeatureProviderConfig {
    fn default() -> Self {
        FeatureProviderConfig::SsdDescriptor(SsdConfig::default())
    }
}

impl FeatureProviderConfig {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureProviderConfig::Intensity => "intensity",
            FeatureProviderConfig::SsdDescriptor(_) => "ssd-descriptor",
            FeatureProviderConfig::Embedded { .. } => "embedded",
        }
    }

    /// Extracts features from an image; embedded providers cannot.
    pub fn extract(&self, vol: &Volume) -> Result<FeatureVolume> {
        match self {
            FeatureProviderConfig::Intensity => extract_intensity(vol),
            FeatureProviderConfig::SsdDescriptor(cfg) => extract_ssd_descriptor(vol, cfg),
            FeatureProviderConfig::Embedded { .. } => Err(Error::InvalidConfig(
                "embedded features are loaded from files, not extracted from images".into(),
            )),
        }
    }
}
