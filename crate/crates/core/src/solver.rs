//! Per-level discrete solver.
//!
//! The registration energy is split with an auxiliary field `v` and a
//! coupling term `w * |v - u|^2`, `w = 1 / (2 theta)`. Each alternation
//! solves the data term point-wise over the cost volume and then smooths
//! with average pooling; `w` grows along the schedule.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_volume::CostVolume;
use crate::displacement::DisplacementField;
use crate::error::{Error, Result};
use crate::filter::box_mean3;

/// Default coupling weights `1 / (2 theta)`, one alternation each.
pub const DEFAULT_SCHEDULE: [f64; 6] = [0.003, 0.01, 0.03, 0.1, 0.3, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Coupling weights, strictly increasing, non-negative.
    pub schedule: Vec<f64>,
    /// Odd edge length of the averaging window.
    pub kernel: usize,
    /// Averaging passes per alternation.
    pub passes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            schedule: DEFAULT_SCHEDULE.to_vec(),
            kernel: 3,
            passes: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidConfig("solver schedule is empty".into()));
        }
        if self.schedule.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule weights must be finite and non-negative: {:?}",
                self.schedule
            )));
        }
        if self.schedule.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidConfig(format!(
                "schedule must be strictly increasing: {:?}",
                self.schedule
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.passes == 0 {
            return Err(Error::InvalidConfig("smoothing passes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Point-wise data step.
///
/// For each voxel, picks the candidate `d` maximizing
/// `sim(x, d) - w * (e_x^2 + e_y^2 + e_z^2)` with `e = d - u_hat(x)`
/// (terms summed in that order). Ties go to the lowest candidate rank.
pub fn pointwise_update(cost: &CostVolume, u_hat: &DisplacementField, w: f64) -> Result<DisplacementField> {
    if u_hat.dims() != cost.dims() {
        return Err(Error::DimensionMismatch {
            context: "pointwise_update: field vs cost volume",
            left: u_hat.dims(),
            right: cost.dims(),
        });
    }
    let radius = cost.radius();
    let side = radius.side();
    let n = radius.get() as isize;
    let offsets: Vec<f64> = (-n..=n).map(|d| d as f64).collect();
    let nvox = cost.num_voxels();

    let mut best = vec![[0.0f64; 3]; nvox];
    best.par_iter_mut().enumerate().for_each_init(
        || (Vec::new(), vec![0.0; side], vec![0.0; side], vec![0.0; side]),
        |(buf, ex, ey, ez), (v, out)| {
            let u = u_hat.at(v);
            for i in 0..side {
                ex[i] = (offsets[i] - u[0]) * (offsets[i] - u[0]);
                ey[i] = (offsets[i] - u[1]) * (offsets[i] - u[1]);
                ez[i] = (offsets[i] - u[2]) * (offsets[i] - u[2]);
            }
            let row = cost.row(v, buf);
            let mut best_score = f64::NEG_INFINITY;
            let mut best_k = 0;
            let mut k = 0;
            for exi in ex.iter() {
                for eyj in ey.iter() {
                    let exy = exi + eyj;
                    for ezk in ez.iter() {
                        let score = row[k] as f64 - w * (exy + ezk);
                        if score > best_score {
                            best_score = score;
                            best_k = k;
                        }
                        k += 1;
                    }
                }
            }
            *out = radius.unrank(best_k).map(|d| d as f64);
        },
    );
    let mut data = vec![0.0; 3 * nvox];
    for (v, d) in best.iter().enumerate() {
        for c in 0..3 {
            data[c * nvox + v] = d[c];
        }
    }
    DisplacementField::from_data(cost.dims(), u_hat.spacing(), data)
}

/// Smoothing step: `passes` rounds of `kernel^3` average pooling per component.
pub fn smooth_update(v_hat: &DisplacementField, cfg: &SolverConfig) -> DisplacementField {
    let dims = v_hat.dims();
    let nvox = v_hat.num_voxels();
    let radius = cfg.kernel / 2;
    let mut data = Vec::with_capacity(3 * nvox);
    for c in 0..3 {
        let mut channel = v_hat.data()[c * nvox..(c + 1) * nvox].to_vec();
        for _ in 0..cfg.passes {
            channel = box_mean3(&channel, dims, radius);
        }
        data.extend(channel);
    }
    DisplacementField::from_data(dims, v_hat.spacing(), data).expect("averaging keeps values finite")
}

/// Diagnostics of one alternation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alternation {
    pub weight: f64,
    /// `max |v_hat - u_hat|` after this alternation's smoothing step.
    pub coupling_gap: f64,
}

#[derive(Clone, Debug)]
pub struct LevelSolution {
    pub field: DisplacementField,
    pub alternations: Vec<Alternation>,
    pub elapsed_ms: f64,
}

impl LevelSolution {
    /// Coupling gap of the final alternation.
    pub fn final_gap(&self) -> f64 {
        self.alternations.last().map_or(0.0, |a| a.coupling_gap)
    }
}

/// Alternates point-wise and smoothing steps over the schedule.
pub fn solve_level(cost: &CostVolume, u_init: &DisplacementField, cfg: &SolverConfig) -> Result<LevelSolution> {
    cfg.validate()?;
    let start = Instant::now();
    let mut u_hat = u_init.clone();
    let mut alternations = Vec::with_capacity(cfg.schedule.len());
    for &w in &cfg.schedule {
        let v_hat = pointwise_update(cost, &u_hat, w)?;
        u_hat = smooth_update(&v_hat, cfg);
        let gap = v_hat
            .data()
            .iter()
            .zip(u_hat.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        alternations.push(Alternation {
            weight: w,
            coupling_gap: gap,
        });
    }
    Ok(LevelSolution {
        field: u_hat,
        alternations,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
