//! Seeded phantoms and smooth ground-truth deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::displacement::DisplacementField;
use crate::error::{Error, Result};
use crate::filter::box_mean3;
use crate::volume::{Dims, Volume, VolumeKind};

/// Smallest accepted phantom edge length.
pub const MIN_PHANTOM_SIZE: usize = 16;
/// Fold-free guard on the generated field.
pub const MIN_JACOBIAN: f64 = 0.1;
pub const MAX_FOLD_RETRIES: usize = 10;

const BODY_INTENSITY: f64 = 100.0;
const TEXTURE_AMPLITUDE: f64 = 15.0;

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }

    fn bounding_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }
}

/// Uniform white noise smoothed by three box passes, scaled to unit max.
fn smooth_noise(dims: Dims, radius: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for _ in 0..3 {
        v = box_mean3(&v, dims, radius);
    }
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        v.iter_mut().for_each(|x| *x /= peak);
    }
    v
}

/// Body ellipsoid holding 4 to 8 disjoint ellipsoidal organs labelled
/// `1..=K`, with distinct organ intensities and smooth texture everywhere.
pub fn make_phantom(dims: Dims, seed: u64) -> Result<(Volume, Volume)> {
    if let Some(axis) = (0..3).find(|&a| dims[a] < MIN_PHANTOM_SIZE) {
        return Err(Error::DegenerateAxis {
            context: "phantom",
            axis,
            size: dims[axis],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.map(|n| n as f64);
    let center = d.map(|n| (n - 1.0) / 2.0);
    let body = Ellipsoid {
        center,
        radii: d.map(|n| rng.gen_range(0.40..0.46) * n),
    };

    let count = rng.gen_range(4..=8);
    let mut organs: Vec<Ellipsoid> = Vec::with_capacity(count);
    let mut scale = 1.0;
    while organs.len() < count {
        if scale < 0.1 {
            return Err(Error::InvalidConfig(format!("cannot place {count} organs in a {dims:?} phantom")));
        }
        let mut placed = false;
        for _ in 0..200 {
            let radii = body.radii.map(|b| (rng.gen_range(0.16..0.30) * scale * b).max(1.5));
            let r = radii.iter().cloned().fold(0.0, f64::max);
            let c = [0, 1, 2].map(|a| center[a] + rng.gen_range(-1.0..1.0) * body.radii[a]);
            // Centre inside the body shrunk by the organ's largest radius.
            let inside = body.radii.iter().all(|&b| b > r + 1.0)
                && Ellipsoid {
                    center,
                    radii: body.radii.map(|b| b - r - 1.0),
                }
                .level(c)
                    <= 1.0;
            let disjoint = organs.iter().all(|o| {
                let dist = (0..3).map(|a| (o.center[a] - c[a]).powi(2)).sum::<f64>().sqrt();
                dist > o.bounding_radius() + r + 1.0
            });
            if inside && disjoint {
                organs.push(Ellipsoid { center: c, radii });
                placed = true;
                break;
            }
        }
        if !placed {
            scale *= 0.8;
        }
    }

    let mut intensities: Vec<f64> = (0..count).map(|k| 160.0 + 45.0 * k as f64).collect();
    for i in (1..count).rev() {
        intensities.swap(i, rng.gen_range(0..=i));
    }
    let texture_radius = (dims.iter().min().copied().unwrap_or(MIN_PHANTOM_SIZE) / 24).max(1);
    let texture = smooth_noise(dims, texture_radius, &mut rng);

    let n: usize = dims.iter().product();
    let mut image = vec![0.0; n];
    let mut labels = vec![0.0; n];
    for v in 0..n {
        let p = crate::volume::voxel_coords(dims, v).map(|i| i as f64);
        let mut value = if body.level(p) <= 1.0 { BODY_INTENSITY } else { 0.0 };
        for (k, o) in organs.iter().enumerate() {
            if o.level(p) <= 1.0 {
                value = intensities[k];
                labels[v] = (k + 1) as f64;
                break;
            }
        }
        image[v] = value + TEXTURE_AMPLITUDE * texture[v];
    }
    Ok((
        Volume::new(dims, [1.0; 3], 1, VolumeKind::ScalarImage, image)?,
        Volume::new(dims, [1.0; 3], 1, VolumeKind::LabelMap, labels)?,
    ))
}

/// Box width whose three-fold self-convolution has standard deviation
/// `sigma`, rounded to the nearest odd integer.
pub fn box_width_for_sigma(sigma: f64) -> usize {
    let w = (4.0 * sigma * sigma + 1.0).sqrt();
    let odd = (((w - 1.0) / 2.0).round() as usize) * 2 + 1;
    odd.max(1)
}

/// Smooth random field with maximum vector norm `max_magnitude` voxels.
///
/// If the minimum Jacobian determinant is at most [`MIN_JACOBIAN`] the field
/// is scaled by 0.8 and checked again, up to [`MAX_FOLD_RETRIES`] times.
pub fn make_smooth_field(dims: Dims, max_magnitude: f64, sigma: f64, seed: u64) -> Result<DisplacementField> {
    if !(max_magnitude >= 0.0 && max_magnitude.is_finite()) {
        return Err(Error::InvalidConfig(format!("magnitude must be non-negative, got {max_magnitude}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma must be non-negative, got {sigma}")));
    }
    if max_magnitude == 0.0 {
        return Ok(DisplacementField::zeros(dims, [1.0; 3]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = box_width_for_sigma(sigma) / 2;
    // Filter on a grid padded by the filter support so that border voxels
    // see the same statistics as interior ones.
    let pad = 3 * radius;
    let padded = dims.map(|n| n + 2 * pad);
    let np: usize = padded.iter().product();
    let mut data = Vec::with_capacity(3 * dims.iter().product::<usize>());
    for _ in 0..3 {
        let mut c: Vec<f64> = (0..np).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..3 {
            c = box_mean3(&c, padded, radius);
        }
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                let row = ((x + pad) * padded[1] + y + pad) * padded[2] + pad;
                data.extend_from_slice(&c[row..row + dims[2]]);
            }
        }
    }
    let raw = DisplacementField::from_data(dims, [1.0; 3], data)?;
    let peak = raw.max_norm();
    if peak == 0.0 {
        return Ok(DisplacementField::zeros(dims, [1.0; 3]));
    }
    let mut field = raw.scaled(max_magnitude / peak);
    let mut min_det = f64::NAN;
    for attempt in 0..=MAX_FOLD_RETRIES {
        if attempt > 0 {
            field = field.scaled(0.8);
        }
        min_det = if dims.iter().all(|&d| d >= 3) {
            field.jacobian_determinant()?.data().iter().cloned().fold(f64::INFINITY, f64::min)
        } else {
            f64::INFINITY
        };
        if min_det > MIN_JACOBIAN {
            return Ok(field);
        }
    }
    Err(Error::FoldingNotResolved {
        retries: MAX_FOLD_RETRIES,
        min_det,
    })
}

/// Offset between a pair's phantom seed and its deformation seed.
pub const FIELD_SEED_OFFSET: u64 = 1000;

/// A phantom, a ground-truth deformation and the phantom warped by it.
///
/// Registering `warped_image` (fixed) against `image` (moving) has
/// `field` as its answer.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub image: Volume,
    pub labels: Volume,
    pub field: DisplacementField,
    pub warped_image: Volume,
    pub warped_labels: Volume,
}

pub fn make_pair(dims: Dims, seed: u64, max_magnitude: f64, sigma: f64) -> Result<SyntheticPair> {
    let (image, labels) = make_phantom(dims, seed)?;
    let field = make_smooth_field(dims, max_magnitude, sigma, seed.wrapping_add(FIELD_SEED_OFFSET))?;
    Ok(SyntheticPair {
        warped_image: field.warp(&image)?,
        warped_labels: field.warp(&labels)?,
        image,
        labels,
        field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_seeded() {
        let (a, la) = make_phantom([24, 20, 16], 3).unwrap();
        let (b, lb) = make_phantom([24, 20, 16], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = make_phantom([24, 20, 16], 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn organ_count_in_range() {
        for seed in 0..100 {
            let (_, labels) = make_phantom([32, 32, 32], seed).unwrap();
            let k = crate::metrics::foreground_labels(&labels);
            assert!((4..=8).contains(&k.len()), "seed {seed}: {k:?}");
            assert_eq!(k, (1..=k.len() as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn phantom_rejects_small_dims() {
        assert!(matches!(make_phantom([16, 15, 16], 0), Err(Error::DegenerateAxis { axis: 1, .. })));
    }

    #[test]
    fn box_width() {
        assert_eq!(box_width_for_sigma(8.0), 17);
        assert_eq!(box_width_for_sigma(0.0), 1);
        assert_eq!(box_width_for_sigma(1.0), 3);
    }

    #[test]
    fn field_magnitude_and_seed() {
        assert_eq!(make_smooth_field([8, 8, 8], 0.0, 2.0, 1).unwrap().max_abs(), 0.0);
        let a = make_smooth_field([24, 24, 24], 2.0, 4.0, 7).unwrap();
        assert!((a.max_norm() - 2.0).abs() < 1e-6);
        assert_eq!(a, make_smooth_field([24, 24, 24], 2.0, 4.0, 7).unwrap());
    }

    #[test]
    fn pair_is_consistent() {
        let p = make_pair([20, 20, 20], 2, 2.0, 2.0).unwrap();
        assert_eq!(p.warped_image, p.field.warp(&p.image).unwrap());
        assert_eq!(p.warped_labels.kind(), VolumeKind::LabelMap);
        assert!((p.field.max_norm() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn extreme_magnitude_cannot_be_unfolded() {
        let r = make_smooth_field([16, 16, 16], 500.0, 1.0, 1);
        assert!(matches!(r, Err(Error::FoldingNotResolved { .. })), "{r:?}");
    }
}
