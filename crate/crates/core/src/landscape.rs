//! Similarity landscapes under two-axis rotations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureProviderConfig, FeatureVolume};
use crate::volume::{AffineTransform, Volume};

/// Mean over voxels (or over `mask`) of the per-voxel dot product.
pub fn similarity_score(a: &FeatureVolume, b: &FeatureVolume, mask: Option<&[bool]>) -> Result<f64> {
    a.volume().check_same_dims(b.volume(), "similarity: a vs b")?;
    if a.channels() != b.channels() {
        return Err(Error::ChannelMismatch {
            context: "similarity: a vs b",
            left: a.channels(),
            right: b.channels(),
        });
    }
    let n = a.volume().num_voxels();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::InvalidConfig(format!("mask has {} entries for {n} voxels", m.len())));
        }
    }
    let (da, db) = (a.volume().data(), b.volume().data());
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in 0..n {
        if mask.is_some_and(|m| !m[v]) {
            continue;
        }
        sum += (0..a.channels()).map(|c| da[c * n + v] * db[c * n + v]).sum::<f64>();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    /// First rotation axis, then second.
    pub axes: (usize, usize),
    /// Sweep covers `[-max_deg, max_deg]` on both axes.
    pub max_deg: f64,
    pub step_deg: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            axes: (0, 1),
            max_deg: 60.0,
            step_deg: 5.0,
        }
    }
}

impl LandscapeConfig {
    pub fn validate(&self) -> Result<()> {
        let (i, j) = self.axes;
        if i > 2 || j > 2 || i == j {
            return Err(Error::InvalidConfig(format!("axes must be distinct in {{0, 1, 2}}, got ({i}, {j})")));
        }
        if !(self.step_deg > 0.0 && self.step_deg.is_finite()) {
            return Err(Error::InvalidConfig(format!("step must be positive, got {}", self.step_deg)));
        }
        if !(self.max_deg >= 0.0 && self.max_deg.is_finite()) {
            return Err(Error::InvalidConfig(format!("range must be symmetric about 0, got max {}", self.max_deg)));
        }
        let m = self.max_deg / self.step_deg;
        if (m - m.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "range {} is not a multiple of step {}",
                self.max_deg, self.step_deg
            )));
        }
        Ok(())
    }

    /// Sweep angles in ascending order; zero is always exact.
    pub fn angles(&self) -> Vec<f64> {
        let m = (self.max_deg / self.step_deg).round() as i64;
        (-m..=m).map(|k| k as f64 * self.step_deg).collect()
    }
}

/// Dense score grid indexed `[alpha][beta]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub axes: (usize, usize),
    pub angles_deg: Vec<f64>,
    pub scores: Vec<f64>,
}

impl Landscape {
    pub fn score(&self, alpha: usize, beta: usize) -> f64 {
        self.scores[alpha * self.angles_deg.len() + beta]
    }

    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let n = self.angles_deg.len();
        self.scores
            .iter()
            .enumerate()
            .map(move |(k, &s)| (self.angles_deg[k / n], self.angles_deg[k % n], s))
    }

    /// Angle pair of the first cell holding the largest score.
    pub fn argmax(&self) -> (f64, f64) {
        let mut best = (0.0, 0.0, f64::NEG_INFINITY);
        for c in self.cells() {
            if c.2 > best.2 {
                best = c;
            }
        }
        (best.0, best.1)
    }

    /// Mean score over cells whose angles satisfy `keep`; NaN if none do.
    pub fn mean_where(&self, keep: impl Fn(f64, f64) -> bool) -> f64 {
        let (sum, count) = self
            .cells()
            .filter(|&(a, b, _)| keep(a, b))
            .fold((0.0, 0usize), |(s, n), (_, _, v)| (s + v, n + 1));
        sum / count as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha_deg,beta_deg,score\n");
        for (a, b, s) in self.cells() {
            out.push_str(&format!("{a},{b},{}\n", format_significant(s, 6)));
        }
        out
    }
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if exp < -4 || exp >= digits as i32 {
        let s = format!("{:.*e}", digits - 1, x);
        let (mantissa, e) = s.split_once('e').expect("exponent present");
        format!("{}e{e}", trim(mantissa.to_string()))
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    }
}

fn sweep(
    dims: crate::volume::Dims,
    cfg: &LandscapeConfig,
    reference: &FeatureVolume,
    mask: Option<&[bool]>,
    rotated: impl Fn(&AffineTransform) -> Result<FeatureVolume> + Sync,
) -> Result<Landscape> {
    let angles = cfg.angles();
    let n = angles.len();
    let (i, j) = cfg.axes;
    let scores = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let a = AffineTransform::rotation(dims, i, angles[k / n].to_radians())?;
            let b = AffineTransform::rotation(dims, j, angles[k % n].to_radians())?;
            similarity_score(&rotated(&a.then(&b)?)?, reference, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Landscape {
        axes: cfg.axes,
        angles_deg: angles,
        scores,
    })
}

/// Self-comparison landscape: features of the rotated image against
/// features of the original, for an extracting provider.
pub fn rotation_landscape(
    image: &Volume,
    provider: &FeatureProviderConfig,
    cfg: &LandscapeConfig,
    mask: Option<&[bool]>,
) -> Result<Landscape> {
    cfg.validate()?;
    let reference = provider.extract(image)?;
    sweep(image.dims(), cfg, &reference, mask, |t| provider.extract(&image.warp_affine(t)?))
}

/// Self-comparison landscape for precomputed features, which are rotated
/// directly.
pub fn feature_rotation_landscape(
    features: &FeatureVolume,
    cfg: &LandscapeConfig,
    mask: Option<&[bool]>,
) -> Result<Landscape> {
    cfg.validate()?;
    sweep(features.dims(), cfg, features, mask, |t| features.warp_affine(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;

    fn features(dims: [usize; 3], channels: usize, data: Vec<f64>) -> FeatureVolume {
        FeatureVolume::raw(Volume::new(dims, [1.0; 3], channels, VolumeKind::FeatureMap, data).unwrap()).unwrap()
    }

    #[test]
    fn score_by_hand() {
        // Two voxels, two channels: (1, 2).(3, -1) = 1 and (0, 4).(2, 0.5) = 2.
        let a = features([2, 1, 1], 2, vec![1.0, 0.0, 2.0, 4.0]);
        let b = features([2, 1, 1], 2, vec![3.0, 2.0, -1.0, 0.5]);
        assert_eq!(similarity_score(&a, &b, None).unwrap(), 1.5);
        assert_eq!(similarity_score(&a, &b, Some(&[false, true])).unwrap(), 2.0);
    }

    #[test]
    fn normalized_self_and_orthogonal() {
        let a = features([2, 2, 1], 2, vec![1.0, 0.5, -2.0, 3.0, 0.2, 1.0, 1.0, -4.0]).normalized();
        assert!((similarity_score(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let x = features([2, 1, 1], 2, vec![1.0, 1.0, 0.0, 0.0]);
        let y = features([2, 1, 1], 2, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(similarity_score(&x, &y, None).unwrap(), 0.0);
    }

    #[test]
    fn grid_layout() {
        let cfg = LandscapeConfig::default();
        let a = cfg.angles();
        assert_eq!(a.len(), 25);
        assert_eq!(a[12], 0.0);
        assert_eq!((a[0], a[24]), (-60.0, 60.0));
    }

    #[test]
    fn config_validation() {
        let bad = |axes, max_deg, step_deg| LandscapeConfig { axes, max_deg, step_deg }.validate().is_err();
        assert!(bad((1, 1), 60.0, 5.0));
        assert!(bad((0, 3), 60.0, 5.0));
        assert!(bad((0, 1), 60.0, 0.0));
        assert!(bad((0, 1), 60.0, 7.0));
        assert!(!bad((2, 0), 0.0, 1.0));
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(0.123456789, 6), "0.123457");
        assert_eq!(format_significant(-2.0, 6), "-2");
        assert_eq!(format_significant(1234567.0, 6), "1.23457e6");
        assert_eq!(format_significant(0.0000123456789, 6), "1.23457e-5");
        assert_eq!(format_significant(0.0, 6), "0");
    }
}
