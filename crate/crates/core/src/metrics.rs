//! Overlap, regularity and endpoint-error metrics.

use serde::{Deserialize, Serialize};

use crate::displacement::DisplacementField;
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

/// Determinants below this are clamped before taking the log.
pub const LOG_JACOBIAN_FLOOR: f64 = 1e-6;

fn require_labels(vol: &Volume) -> Result<()> {
    if vol.kind() != VolumeKind::LabelMap {
        return Err(Error::WrongKind {
            expected: VolumeKind::LabelMap.name(),
            found: vol.kind().name(),
        });
    }
    Ok(())
}

/// `2 |A ∩ B| / (|A| + |B|)`; 1 when the label is absent from both.
pub fn dice(labels_a: &Volume, labels_b: &Volume, label: u32) -> Result<f64> {
    require_labels(labels_a)?;
    require_labels(labels_b)?;
    labels_a.check_same_dims(labels_b, "dice")?;
    let l = label as f64;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in labels_a.data().iter().zip(labels_b.data()) {
        let ia = a == l;
        let ib = b == l;
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    })
}

/// Mean of [`dice`] over `labels`.
pub fn mean_dice(labels_a: &Volume, labels_b: &Volume, labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig("mean dice over an empty label set".into()));
    }
    let mut sum = 0.0;
    for &l in labels {
        sum += dice(labels_a, labels_b, l)?;
    }
    Ok(sum / labels.len() as f64)
}

/// Distinct non-zero labels in ascending order.
pub fn foreground_labels(labels: &Volume) -> Vec<u32> {
    let mut out: Vec<u32> = labels.data().iter().filter(|&&v| v > 0.0).map(|&v| v as u32).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Population standard deviation of a sample, summed in order.
fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    var.sqrt()
}

/// Standard deviation of `ln det(I + grad u)` over all voxels, with
/// determinants clamped below at [`LOG_JACOBIAN_FLOOR`].
pub fn sd_log_j(u: &DisplacementField) -> Result<f64> {
    let det = u.jacobian_determinant()?;
    Ok(population_std(det.data().iter().map(|d| d.max(LOG_JACOBIAN_FLOOR).ln())))
}

/// Like [`sd_log_j`] but restricted to voxels at least `margin` away from
/// every face.
pub fn sd_log_j_interior(u: &DisplacementField, margin: usize) -> Result<f64> {
    let det = u.jacobian_determinant()?;
    let mask = interior_mask(u.dims(), margin);
    Ok(population_std(
        det.data()
            .iter()
            .zip(mask.clone())
            .filter(|(_, m)| *m)
            .map(|(d, _)| d.max(LOG_JACOBIAN_FLOOR).ln()),
    ))
}

/// Voxel-order mask of voxels at least `margin` from every face.
pub fn interior_mask(dims: [usize; 3], margin: usize) -> impl Iterator<Item = bool> + Clone {
    let n: usize = dims.iter().product();
    (0..n).map(move |v| {
        let p = crate::volume::voxel_coords(dims, v);
        (0..3).all(|a| p[a] >= margin && p[a] + margin < dims[a])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointError {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

/// Euclidean endpoint error over voxels where `mask` is true (all voxels
/// when `mask` is `None`).
pub fn endpoint_error(u_est: &DisplacementField, u_true: &DisplacementField, mask: Option<&[bool]>) -> Result<EndpointError> {
    if u_est.dims() != u_true.dims() {
        return Err(Error::DimensionMismatch {
            context: "endpoint error",
            left: u_est.dims(),
            right: u_true.dims(),
        });
    }
    let n = u_est.num_voxels();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::InvalidConfig(format!("mask has {} entries for {n} voxels", m.len())));
        }
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut count = 0;
    for v in 0..n {
        if mask.is_some_and(|m| !m[v]) {
            continue;
        }
        let a = u_est.at(v);
        let b = u_true.at(v);
        let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        sum += e;
        max = max.max(e);
        count += 1;
    }
    Ok(EndpointError {
        mean: if count == 0 { 0.0 } else { sum / count as f64 },
        max,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> u32) -> Volume {
        Volume::from_fn(dims, [1.0; 3], 1, VolumeKind::LabelMap, |_, x, y, z| f(x, y, z) as f64).unwrap()
    }

    fn cube(offset: usize) -> Volume {
        labels([6, 6, 6], |x, y, z| {
            let inside = (offset..offset + 2).contains(&x) && (1..3).contains(&y) && (1..3).contains(&z);
            inside as u32
        })
    }

    #[test]
    fn dice_fixtures() {
        let a = cube(1);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &cube(3), 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &cube(2), 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &a, 7).unwrap(), 1.0);
        let empty = labels([6, 6, 6], |_, _, _| 0);
        assert_eq!(dice(&a, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn mean_dice_cases() {
        let a = labels([4, 4, 4], |x, _, _| if x < 2 { 1 } else { 2 });
        assert_eq!(mean_dice(&a, &a, &[1, 2]).unwrap(), 1.0);
        // Label 1 identical, label 2 half overlapping.
        let b = labels([4, 4, 4], |x, y, _| match (x < 2, y < 2) {
            (true, _) => 1,
            (false, true) => 2,
            _ => 0,
        });
        let d2 = dice(&a, &b, 2).unwrap();
        assert!((d2 - 2.0 * 16.0 / 48.0).abs() < 1e-15);
        assert!((mean_dice(&a, &b, &[1, 2]).unwrap() - (1.0 + d2) / 2.0).abs() < 1e-15);
        assert_eq!(mean_dice(&a, &a, &[9]).unwrap(), 1.0);
        assert!(mean_dice(&a, &a, &[]).is_err());
        assert_eq!(foreground_labels(&b), vec![1, 2]);
    }

    #[test]
    fn dice_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let va: Vec<u32> = (0..125).map(|_| rng.gen_range(0..3)).collect();
            let vb: Vec<u32> = (0..125).map(|_| rng.gen_range(0..3)).collect();
            let a = labels([5, 5, 5], |x, y, z| va[(x * 5 + y) * 5 + z]);
            let b = labels([5, 5, 5], |x, y, z| vb[(x * 5 + y) * 5 + z]);
            for l in 0..3 {
                let ab = dice(&a, &b, l).unwrap();
                assert_eq!(ab, dice(&b, &a, l).unwrap());
                assert!((0.0..=1.0).contains(&ab));
            }
        }
    }

    #[test]
    fn dice_rejects_non_labels() {
        let s = Volume::zeros([2, 2, 2], [1.0; 3], 1, VolumeKind::ScalarImage).unwrap();
        assert!(matches!(dice(&s, &s, 1), Err(Error::WrongKind { .. })));
        let a = labels([2, 2, 2], |_, _, _| 1);
        let b = labels([2, 2, 3], |_, _, _| 1);
        assert!(matches!(dice(&a, &b, 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn sd_log_j_cases() {
        let zero = DisplacementField::zeros([5, 5, 5], [1.0; 3]);
        assert_eq!(sd_log_j(&zero).unwrap(), 0.0);
        let linear = DisplacementField::from_fn([6, 6, 6], [1.0; 3], |[x, _, _]| [0.1 * x as f64, 0.0, 0.0]);
        assert!(sd_log_j(&linear).unwrap() < 1e-9);
        assert!(sd_log_j(&DisplacementField::zeros([2, 5, 5], [1.0; 3])).is_err());
    }

    #[test]
    fn sd_log_j_of_two_valued_determinant() {
        // u_x = s(y) * x gives a triangular Jacobian with det = 1 + s(y),
        // exact under finite differences since u_x is linear in x.
        let slope = std::f64::consts::E - 1.0;
        let field = DisplacementField::from_fn([5, 6, 4], [1.0; 3], |[x, y, _]| {
            [if y < 3 { 0.0 } else { slope * x as f64 }, 0.0, 0.0]
        });
        assert!((sd_log_j(&field).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(population_std([0.0, 1.0, 0.0, 1.0].into_iter()), 0.5);
    }

    #[test]
    fn sd_log_j_translation_invariant_in_interior() {
        let base = DisplacementField::from_fn([8, 8, 8], [1.0; 3], |[x, y, z]| {
            [0.1 * (y as f64).sin(), 0.05 * (z * x) as f64 / 8.0, 0.02 * x as f64]
        });
        let shifted = DisplacementField::from_fn([8, 8, 8], [1.0; 3], |[x, y, z]| {
            [0.1 * (y as f64).sin() + 2.0, 0.05 * (z * x) as f64 / 8.0 - 1.0, 0.02 * x as f64 + 0.5]
        });
        let a = sd_log_j_interior(&base, 1).unwrap();
        let b = sd_log_j_interior(&shifted, 1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn endpoint_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<f64> = (0..81).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = DisplacementField::from_fn([3, 3, 3], [1.0; 3], |[x, y, z]| {
            let v = (x * 3 + y) * 3 + z;
            [vals[3 * v], vals[3 * v + 1], vals[3 * v + 2]]
        });
        let e = endpoint_error(&a, &a, None).unwrap();
        assert_eq!((e.mean, e.max), (0.0, 0.0));

        let zero = DisplacementField::zeros([3, 3, 3], [1.0; 3]);
        let one = DisplacementField::constant([3, 3, 3], [1.0; 3], [1.0, 0.0, 0.0]);
        let e = endpoint_error(&one, &zero, None).unwrap();
        assert_eq!((e.mean, e.max, e.count), (1.0, 1.0, 27));

        let mut hand = Vec::new();
        for v in 0..27 {
            let p = a.at(v);
            hand.push((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
        }
        let e = endpoint_error(&a, &zero, None).unwrap();
        assert!((e.mean - hand.iter().sum::<f64>() / 27.0).abs() < 1e-15);
        assert_eq!(e.max, hand.iter().cloned().fold(0.0, f64::max));

        let mask: Vec<bool> = (0..27).map(|v| v == 13).collect();
        let e = endpoint_error(&a, &zero, Some(&mask)).unwrap();
        assert_eq!((e.mean, e.count), (hand[13], 1));
        assert!(endpoint_error(&a, &DisplacementField::zeros([3, 3, 4], [1.0; 3]), None).is_err());
    }
}
