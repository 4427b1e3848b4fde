//! Continuous refinement of a displacement field by adaptive-moment descent
//! on feature similarity plus diffusion regularization.
//!
//! Similarity at a voxel is computed against the trilinearly interpolated
//! moving feature at `x + u(x)`. For normalized features each part of the
//! interpolated vector is renormalized (per-part cosine), which keeps the
//! score bounded by the number of parts and makes sub-voxel optima
//! reachable; unnormalized features use the plain dot product.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::displacement::DisplacementField;
use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::volume::{voxel_coords, Trilinear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceOptConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Weight of the diffusion term.
    pub lambda_diff: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for InstanceOptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            iterations: 50,
            lambda_diff: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl InstanceOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lambda_diff >= 0.0 && self.lambda_diff.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {}", self.lambda_diff)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "moment decay rates must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_inputs(f_fix: &FeatureVolume, f_mov: &FeatureVolume, u: &DisplacementField) -> Result<()> {
    f_fix.check_compatible(f_mov, "instance optimization: fixed vs moving features")?;
    if u.dims() != f_fix.dims() {
        return Err(Error::DimensionMismatch {
            context: "instance optimization: field vs features",
            left: u.dims(),
            right: f_fix.dims(),
        });
    }
    Ok(())
}

/// Per-voxel similarity and, optionally, its gradient w.r.t. the sample point.
fn voxel_similarity(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    cosine: bool,
    v: usize,
    p: [f64; 3],
    sampled: &mut [f64],
    want_grad: bool,
) -> (f64, [f64; 3]) {
    let dims = f_fix.dims();
    let n = f_fix.volume().num_voxels();
    let fix = f_fix.volume().data();
    let mov = f_mov.volume().data();
    let tri = Trilinear::new(dims, p);
    for (c, s) in sampled.iter_mut().enumerate() {
        *s = tri.eval(&mov[c * n..(c + 1) * n]);
    }
    let mut sim = 0.0;
    let mut grad = [0.0; 3];
    let mut start = 0;
    for &len in f_fix.parts() {
        let range = start..start + len;
        start += len;
        let dot: f64 = range.clone().map(|c| fix[c * n + v] * sampled[c]).sum();
        let (scale, norm) = if cosine {
            let norm = range.clone().map(|c| sampled[c] * sampled[c]).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            (1.0 / norm, norm)
        } else {
            (1.0, 1.0)
        };
        sim += dot * scale;
        if !want_grad {
            continue;
        }
        for c in range {
            let coeff = if cosine {
                fix[c * n + v] / norm - dot * sampled[c] / (norm * norm * norm)
            } else {
                fix[c * n + v]
            };
            if coeff == 0.0 {
                continue;
            }
            let g = tri.gradient(&mov[c * n..(c + 1) * n]);
            for a in 0..3 {
                grad[a] += coeff * g[a];
            }
        }
    }
    (sim, grad)
}

/// Loss and optional gradient, reduced in voxel order for determinism.
fn evaluate(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    u: &DisplacementField,
    lambda: f64,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let dims = u.dims();
    let nvox = u.num_voxels();
    let channels = f_fix.channels();
    let cosine = f_fix.is_normalized() && f_mov.is_normalized();
    let ud = u.data();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let inv = 1.0 / nvox as f64;

    let per_voxel: Vec<(f64, f64, [f64; 3])> = (0..nvox)
        .into_par_iter()
        .map_init(
            || vec![0.0; channels],
            |sampled, v| {
                let x = voxel_coords(dims, v);
                let uv = u.at(v);
                let p = [x[0] as f64 + uv[0], x[1] as f64 + uv[1], x[2] as f64 + uv[2]];
                let (sim, sg) = voxel_similarity(f_fix, f_mov, cosine, v, p, sampled, want_grad);

                let mut reg = 0.0;
                let mut grad = [0.0; 3];
                for a in 0..3 {
                    let s = strides[a];
                    let fwd = x[a] + 1 < dims[a];
                    let bwd = x[a] > 0;
                    for c in 0..3 {
                        let here = ud[c * nvox + v];
                        if fwd {
                            let diff = ud[c * nvox + v + s] - here;
                            reg += diff * diff;
                            grad[c] -= diff;
                        }
                        if bwd {
                            grad[c] += here - ud[c * nvox + v - s];
                        }
                    }
                }
                for c in 0..3 {
                    grad[c] = -sg[c] * inv + 2.0 * lambda * inv * grad[c];
                }
                (sim, reg, grad)
            },
        )
        .collect();

    let mut sim_sum = 0.0;
    let mut reg_sum = 0.0;
    for (s, r, _) in &per_voxel {
        sim_sum += s;
        reg_sum += r;
    }
    let loss = -sim_sum * inv + lambda * reg_sum * inv;
    let grad = want_grad.then(|| {
        let mut g = vec![0.0; 3 * nvox];
        for (v, (_, _, gv)) in per_voxel.iter().enumerate() {
            for c in 0..3 {
                g[c * nvox + v] = gv[c];
            }
        }
        g
    });
    (loss, grad)
}

/// `-(mean similarity) + lambda * mean |grad u|^2` with forward differences
/// (zero across the far border).
pub fn instance_loss(f_fix: &FeatureVolume, f_mov: &FeatureVolume, u: &DisplacementField, lambda: f64) -> Result<f64> {
    check_inputs(f_fix, f_mov, u)?;
    Ok(evaluate(f_fix, f_mov, u, lambda, false).0)
}

/// Exact gradient of [`instance_loss`] w.r.t. every component of `u`.
pub fn instance_loss_gradient(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    u: &DisplacementField,
    lambda: f64,
) -> Result<DisplacementField> {
    check_inputs(f_fix, f_mov, u)?;
    let (_, g) = evaluate(f_fix, f_mov, u, lambda, true);
    DisplacementField::from_data(u.dims(), u.spacing(), g.expect("gradient requested"))
}

#[derive(Clone, Debug)]
pub struct InstanceOptResult {
    pub field: DisplacementField,
    /// Loss before each step, followed by the loss of the returned field.
    pub loss_trace: Vec<f64>,
    pub elapsed_ms: f64,
}

/// Bias-corrected adaptive-moment descent on [`instance_loss`].
pub fn instance_optimize(
    f_fix: &FeatureVolume,
    f_mov: &FeatureVolume,
    u_init: &DisplacementField,
    cfg: &InstanceOptConfig,
) -> Result<InstanceOptResult> {
    cfg.validate()?;
    check_inputs(f_fix, f_mov, u_init)?;
    let start = Instant::now();
    let mut u = u_init.clone();
    let len = u.data().len();
    let mut m = vec![0.0; len];
    let mut s = vec![0.0; len];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for t in 1..=cfg.iterations {
        let (loss, grad) = evaluate(f_fix, f_mov, &u, cfg.lambda_diff, true);
        trace.push(loss);
        let grad = grad.expect("gradient requested");
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        let mut data = u.data().to_vec();
        for i in 0..len {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            s[i] = cfg.beta2 * s[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            data[i] -= cfg.learning_rate * (m[i] / c1) / ((s[i] / c2).sqrt() + cfg.epsilon);
        }
        u = DisplacementField::from_data(u.dims(), u.spacing(), data)?;
    }
    trace.push(evaluate(f_fix, f_mov, &u, cfg.lambda_diff, false).0);
    Ok(InstanceOptResult {
        field: u,
        loss_trace: trace,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
