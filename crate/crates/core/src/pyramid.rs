//! Coarse-to-fine registration driver.
//!
//! Level 0 is full resolution and level `L - 1` the coarsest. Each level
//! works on a feature grid at half its image resolution: the moving image is
//! pre-warped with the field accumulated so far, a cost volume is built
//! against the fixed features, the convex solver yields an increment and
//! the increment is composed onto the accumulated field.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost_volume::{build_cost_volume_with_mode, CostMode, SearchRadius, MAX_MATERIALIZED_RADIUS};
use crate::displacement::DisplacementField;
use crate::error::{Error, Result};
use crate::features::{FeatureProviderConfig, FeatureVolume};
use crate::instance_opt::{instance_optimize, InstanceOptConfig};
use crate::solver::{solve_level, Alternation, SolverConfig};
use crate::volume::{Dims, Volume, VolumeKind};

/// Feature grids smaller than this on any axis are rejected.
pub const MIN_FEATURE_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: usize,
    /// Search radius per level, coarsest first.
    pub radii: Vec<usize>,
    pub solver: SolverConfig,
    pub provider: FeatureProviderConfig,
    pub run_instance_opt: bool,
    pub instance_opt: InstanceOptConfig,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            radii: vec![2, 3, 3],
            solver: SolverConfig::default(),
            provider: FeatureProviderConfig::default(),
            run_instance_opt: true,
            instance_opt: InstanceOptConfig::default(),
        }
    }
}

impl PyramidConfig {
    /// Single-level or multi-level configuration with the given radii
    /// (coarsest first) and default everything else.
    pub fn with_radii(radii: &[usize]) -> Self {
        Self {
            levels: radii.len(),
            radii: radii.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
        }
        if self.radii.len() != self.levels {
            return Err(Error::InvalidConfig(format!(
                "{} radii given for {} levels",
                self.radii.len(),
                self.levels
            )));
        }
        self.solver.validate()?;
        if self.run_instance_opt {
            self.instance_opt.validate()?;
        }
        Ok(())
    }

    /// Search radius of level `level` (0 = finest).
    pub fn radius_at(&self, level: usize) -> usize {
        self.radii[self.levels - 1 - level]
    }
}

/// `sum_l N_l * 2^(l + 1)`: radius times the total downsampling of the
/// level's feature grid relative to full resolution.
pub fn effective_capture_radius(cfg: &PyramidConfig) -> usize {
    (0..cfg.levels).map(|l| cfg.radius_at(l) << (l + 1)).sum()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelTimings {
    pub features_ms: f64,
    pub cost_ms: f64,
    pub solve_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    /// 0 is the finest level.
    pub level: usize,
    pub image_dims: Dims,
    pub feature_dims: Dims,
    pub radius: usize,
    pub cost_mode: CostMode,
    pub alternations: Vec<Alternation>,
    pub final_coupling_gap: f64,
    /// Largest component of this level's increment, in feature voxels.
    pub max_increment: f64,
    pub timings: LevelTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub loss_trace: Vec<f64>,
    pub timings: InstanceTimings,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceTimings {
    pub optimize_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub total_ms: f64,
}

/// Serializable account of a run. All wall-clock values sit under keys
/// named `timings`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub config: PyramidConfig,
    pub effective_capture_radius: usize,
    /// Coarsest level first, in execution order.
    pub levels: Vec<LevelReport>,
    pub instance_opt: Option<InstanceReport>,
    pub max_abs_displacement: f64,
    pub timings: RunTimings,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Full-resolution field on the fixed grid, in voxels.
    pub field: DisplacementField,
    pub report: RegistrationReport,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Feature source for every level.
enum Provider<'a> {
    Extract(&'a FeatureProviderConfig),
    /// Finest-grid embeddings, already normalized, one per level.
    Embedded {
        fixed: Vec<FeatureVolume>,
        moving: Vec<FeatureVolume>,
    },
}

impl Provider<'_> {
    fn fixed(&self, level: usize, image: &Volume) -> Result<FeatureVolume> {
        match self {
            Provider::Extract(p) => p.extract(&image.downsample_half()?),
            Provider::Embedded { fixed, .. } => Ok(fixed[level].clone()),
        }
    }

    fn moving(&self, level: usize, image: &Volume, u_feat: &DisplacementField, u_img: &DisplacementField) -> Result<FeatureVolume> {
        match self {
            Provider::Extract(p) => p.extract(&u_img.warp(image)?.downsample_half()?),
            Provider::Embedded { moving, .. } => moving[level].warped(u_feat),
        }
    }

    /// Unwarped moving features on the finest grid.
    fn moving_unwarped(&self, image: &Volume) -> Result<FeatureVolume> {
        match self {
            Provider::Extract(p) => p.extract(&image.downsample_half()?),
            Provider::Embedded { moving, .. } => Ok(moving[0].clone()),
        }
    }
}

fn embedding_pyramid(finest: FeatureVolume, levels: usize, expected: Dims) -> Result<Vec<FeatureVolume>> {
    if finest.dims() != expected {
        return Err(Error::DimensionMismatch {
            context: "embedding grid vs half-resolution image grid",
            left: finest.dims(),
            right: expected,
        });
    }
    let mut out = vec![finest];
    for _ in 1..levels {
        let next = out.last().expect("non-empty").downsample_half()?;
        out.push(next);
    }
    Ok(out)
}

/// Registers `moving` onto `fixed`; the returned field maps fixed-grid
/// voxels to moving-grid positions, `moving(x + u(x)) ~ fixed(x)`.
pub fn register(fixed: &Volume, moving: &Volume, cfg: &PyramidConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    fixed.check_same_dims(moving, "register: fixed vs moving")?;
    if fixed.spacing() != moving.spacing() {
        return Err(Error::InvalidVolume(format!(
            "register: fixed spacing {:?} differs from moving spacing {:?}",
            fixed.spacing(),
            moving.spacing()
        )));
    }
    let start = Instant::now();
    let levels = cfg.levels;

    let mut fixed_levels = vec![fixed.clone()];
    let mut moving_levels = vec![moving.clone()];
    for _ in 1..levels {
        let f = fixed_levels.last().expect("non-empty").downsample_half()?;
        let m = moving_levels.last().expect("non-empty").downsample_half()?;
        fixed_levels.push(f);
        moving_levels.push(m);
    }
    let feature_dims: Vec<Dims> = fixed_levels.iter().map(|v| v.dims().map(|n| n.div_ceil(2))).collect();
    for (level, dims) in feature_dims.iter().enumerate() {
        if let Some(axis) = (0..3).find(|&a| dims[a] < MIN_FEATURE_SIZE) {
            return Err(Error::DegenerateAxis {
                context: if level + 1 == levels {
                    "pyramid: coarsest feature grid too small"
                } else {
                    "pyramid: feature grid too small"
                },
                axis,
                size: dims[axis],
            });
        }
    }

    let provider = match &cfg.provider {
        FeatureProviderConfig::Embedded { fixed: fs, moving: ms } => Provider::Embedded {
            fixed: embedding_pyramid(fs.load()?, levels, feature_dims[0])?,
            moving: embedding_pyramid(ms.load()?, levels, feature_dims[0])?,
        },
        p => Provider::Extract(p),
    };

    let feat_spacing = |level: usize| fixed_levels[level].spacing().map(|s| s * 2.0);
    let mut u_total = DisplacementField::zeros(feature_dims[levels - 1], feat_spacing(levels - 1));
    let mut reports = Vec::with_capacity(levels);
    for level in (0..levels).rev() {
        let image_dims = fixed_levels[level].dims();
        let radius = SearchRadius(cfg.radius_at(level));

        let t = Instant::now();
        let u_img = u_total.upsample2x(image_dims)?;
        let f_fix = provider.fixed(level, &fixed_levels[level])?;
        let f_mov = provider.moving(level, &moving_levels[level], &u_total, &u_img)?;
        let features_ms = ms_since(t);

        let t = Instant::now();
        let mode = if radius.get() > MAX_MATERIALIZED_RADIUS {
            CostMode::Streaming
        } else {
            CostMode::Materialized
        };
        let cost = build_cost_volume_with_mode(&f_fix, &f_mov, radius, mode)?;
        let cost_ms = ms_since(t);

        let t = Instant::now();
        let zero = DisplacementField::zeros(feature_dims[level], u_total.spacing());
        let solution = solve_level(&cost, &zero, &cfg.solver)?;
        drop(cost);
        u_total = u_total.compose(&solution.field)?;
        let solve_ms = ms_since(t);

        reports.push(LevelReport {
            level,
            image_dims,
            feature_dims: feature_dims[level],
            radius: radius.get(),
            cost_mode: mode,
            final_coupling_gap: solution.final_gap(),
            max_increment: solution.field.max_abs(),
            alternations: solution.alternations,
            timings: LevelTimings {
                features_ms,
                cost_ms,
                solve_ms,
            },
        });
        if level > 0 {
            u_total = u_total.upsample2x(feature_dims[level - 1])?;
        }
    }

    let instance = if cfg.run_instance_opt {
        let f_fix = provider.fixed(0, &fixed_levels[0])?;
        let f_mov = provider.moving_unwarped(&moving_levels[0])?;
        let r = instance_optimize(&f_fix, &f_mov, &u_total, &cfg.instance_opt)?;
        u_total = r.field;
        Some(InstanceReport {
            loss_trace: r.loss_trace,
            timings: InstanceTimings {
                optimize_ms: r.elapsed_ms,
            },
        })
    } else {
        None
    };

    let field = u_total.upsample2x(fixed.dims())?;
    let field = DisplacementField::from_volume(Volume::new(
        fixed.dims(),
        fixed.spacing(),
        3,
        VolumeKind::VectorField,
        field.into_volume().into_data(),
    )?)?;
    let report = RegistrationReport {
        config: cfg.clone(),
        effective_capture_radius: effective_capture_radius(cfg),
        levels: reports,
        instance_opt: instance,
        max_abs_displacement: field.max_abs(),
        timings: RunTimings { total_ms: ms_since(start) },
    };
    Ok(RegistrationResult { field, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capture_radius() {
        assert_eq!(effective_capture_radius(&PyramidConfig::with_radii(&[3])), 6);
        assert_eq!(effective_capture_radius(&PyramidConfig::default()), 34);
        assert_eq!(effective_capture_radius(&PyramidConfig::with_radii(&[3, 3])), 18);
        assert_eq!(effective_capture_radius(&PyramidConfig::with_radii(&[0, 0, 0])), 0);
    }

    #[test]
    fn default_config_echo() {
        let cfg = PyramidConfig::default();
        assert_eq!(cfg.levels, 3);
        assert_eq!(cfg.radii, vec![2, 3, 3]);
        assert_eq!(cfg.radius_at(2), 2);
        assert_eq!(cfg.radius_at(0), 3);
        assert_eq!(cfg.instance_opt.learning_rate, 0.05);
        assert_eq!(cfg.instance_opt.iterations, 50);
    }

    #[test]
    fn config_validation() {
        let bad = PyramidConfig {
            levels: 2,
            ..PyramidConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let none = PyramidConfig::with_radii(&[]);
        assert!(none.validate().is_err());
    }

    #[test]
    fn rejects_degenerate_pyramid_and_mismatch() {
        let img = |dims| Volume::from_fn(dims, [1.0; 3], 1, VolumeKind::ScalarImage, |_, x, y, z| (x + 2 * y + 3 * z) as f64).unwrap();
        let a = img([24, 24, 24]);
        let r = register(&a, &a, &PyramidConfig::default());
        assert!(matches!(r, Err(Error::DegenerateAxis { .. })), "{r:?}");
        let b = img([24, 24, 26]);
        let r = register(&a, &b, &PyramidConfig::with_radii(&[1]));
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })), "{r:?}");
    }
}
