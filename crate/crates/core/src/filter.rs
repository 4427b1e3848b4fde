//! Separable box filtering with clamp-to-edge borders.

use rayon::prelude::*;

use crate::volume::Dims;

/// Running clamped window sum along a strided line, scaled by `inv`.
fn line_mean(src: &[f64], dst: &mut [f64], start: usize, len: usize, stride: usize, radius: usize, inv: f64) {
    let at = |i: isize| src[start + i.clamp(0, len as isize - 1) as usize * stride];
    let r = radius as isize;
    let mut s: f64 = (-r..=r).map(at).sum();
    for i in 0..len as isize {
        dst[start + i as usize * stride] = s * inv;
        s += at(i + r + 1) - at(i - r);
    }
}

/// Mean over a `2r + 1` window along one axis of a single-channel grid.
pub(crate) fn box_mean_axis(src: &[f64], dims: Dims, axis: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return src.to_vec();
    }
    let [nx, ny, nz] = dims;
    let plane = ny * nz;
    let inv = 1.0 / (2 * radius + 1) as f64;
    let mut out = vec![0.0; src.len()];
    match axis {
        0 => {
            let r = radius as isize;
            out.par_chunks_mut(plane).enumerate().for_each(|(x, dst)| {
                for q in -r..=r {
                    let xs = (x as isize + q).clamp(0, nx as isize - 1) as usize;
                    let s = &src[xs * plane..(xs + 1) * plane];
                    dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            });
        }
        1 => out.par_chunks_mut(plane).enumerate().for_each(|(x, dst)| {
            let s = &src[x * plane..(x + 1) * plane];
            for z in 0..nz {
                line_mean(s, dst, z, ny, nz, radius, inv);
            }
        }),
        _ => out.par_chunks_mut(nz).enumerate().for_each(|(line, dst)| {
            let s = &src[line * nz..(line + 1) * nz];
            line_mean(s, dst, 0, nz, 1, radius, inv);
        }),
    }
    out
}

/// Cubic `(2r + 1)^3` box mean, applied separably along x, y, z.
pub(crate) fn box_mean3(src: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    let a = box_mean_axis(src, dims, 0, radius);
    let b = box_mean_axis(&a, dims, 1, radius);
    box_mean_axis(&b, dims, 2, radius)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(src: &[f64], dims: Dims, axis: usize, radius: usize) -> Vec<f64> {
        let strides = [dims[1] * dims[2], dims[2], 1];
        let r = radius as isize;
        (0..src.len())
            .map(|v| {
                let p = [v / strides[0], (v / dims[2]) % dims[1], v % dims[2]];
                let base = v - p[axis] * strides[axis];
                (-r..=r)
                    .map(|q| src[base + (p[axis] as isize + q).clamp(0, dims[axis] as isize - 1) as usize * strides[axis]])
                    .sum::<f64>()
                    / (2 * radius + 1) as f64
            })
            .collect()
    }

    #[test]
    fn matches_direct_summation() {
        let dims = [5, 7, 4];
        let src: Vec<f64> = (0..140).map(|i| ((i * 37) % 23) as f64 - 11.0).collect();
        for axis in 0..3 {
            for radius in [1, 2, 9] {
                let a = box_mean_axis(&src, dims, axis, radius);
                let b = direct(&src, dims, axis, radius);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-12, "axis {axis} radius {radius}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn constant_is_preserved() {
        let src = vec![2.5; 60];
        assert!(box_mean3(&src, [3, 4, 5], 2).iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
