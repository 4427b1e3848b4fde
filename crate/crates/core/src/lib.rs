//! Dense 3D deformable registration on feature volumes.
//!
//! Features are correlated over a discrete displacement window, the
//! resulting cost volume is optimised with a coupled convex scheme on a
//! coarse-to-fine pyramid, and the result can be refined by gradient-based
//! instance optimisation.

pub mod cost_volume;
pub mod displacement;
pub mod error;
pub mod features;
mod filter;
pub mod instance_opt;
pub mod io;
pub mod landscape;
pub mod metrics;
pub mod pyramid;
pub mod solver;
pub mod synth;
pub mod volume;

pub use cost_volume::{build_cost_volume, build_cost_volume_with_mode, CostMode, CostVolume, SearchRadius};
pub use displacement::DisplacementField;
pub use error::{Error, Result};
pub use features::{FeatureProviderConfig, FeatureVolume, SsdConfig};
pub use instance_opt::{instance_optimize, InstanceOptConfig};
pub use landscape::{feature_rotation_landscape, rotation_landscape, similarity_score, Landscape, LandscapeConfig};
pub use pyramid::{effective_capture_radius, register, PyramidConfig, RegistrationReport, RegistrationResult};
pub use solver::{solve_level, SolverConfig};
pub use volume::{AffineTransform, Dims, Volume, VolumeKind};
