//! Numerical tolerances used across the crate.
//!
//! Kept in one place so tests and library code agree on what "equal",
//! "unit" and "separated" mean.

/// Allowed deviation of a stored point from unit norm.
pub const UNIT_NORM: f64 = 1e-9;

/// Allowed deviation of a weight vector's sum from one.
pub const WEIGHT_SUM: f64 = 1e-12;

/// Points loaded from files are renormalized when within this distance of
/// the sphere and rejected otherwise.
pub const RENORMALIZE: f64 = 1e-6;

/// Two means are treated as colinear when the Frobenius norm of
/// `u vᵀ − v uᵀ` (normalized means) falls below this.
pub const COLINEAR: f64 = 1e-8;

/// Minimum geometric margin for declaring two atom sets disentangled.
pub const SEPARATION_MARGIN: f64 = 1e-4;

/// Linear programs report a separator only above this margin; below it the
/// sets are treated as touching.
pub const LP_MARGIN_FLOOR: f64 = 1e-12;

/// Two atoms closer than this are treated as the same location.
pub const COINCIDENT: f64 = 1e-12;

/// Marginal violation at which Sinkhorn iterations stop.
pub const SINKHORN_MARGINAL: f64 = 1e-9;
