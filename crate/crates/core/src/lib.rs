pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod interpret;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod shapley;
pub mod tensor;

pub use error::{Error, Result};

/// Number of forecast horizons.
pub const HORIZONS: usize = 6;

/// Horizon lengths in months, shortest first.
pub const HORIZON_MONTHS: [u32; HORIZONS] = [3, 6, 9, 12, 24, 36];

/// Column labels used in every per-horizon report.
pub const HORIZON_LABELS: [&str; HORIZONS] = ["d_3m", "d_6m", "d_9m", "d_1y", "d_2y", "d_3y"];
