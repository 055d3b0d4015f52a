//! Per-token probability profiling by semantic category, kernel density
//! estimation, the two-sample hypothesis test, and tidy sweep tables.

mod kde;
mod mwu;
mod profile;
mod tables;

pub use kde::{kde, silverman_bandwidth, DensityCurve, KDE_GRID_POINTS};
pub use mwu::{mann_whitney, permutation_p_value, two_sample_test, MwuMethod, MwuResult};
pub use profile::{profile_csv, profile_tokens, TokenRecord, PROFILE_HEADER};
pub use tables::{
    mask_fraction, rank_sweep_table, threshold_sweep_table, trajectory_table, RankPoint,
    SweepMetrics, ThresholdPoint, TrajectoryPoint,
};
