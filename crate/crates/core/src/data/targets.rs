use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{HORIZONS, HORIZON_MONTHS};

/// Incremental multi-label target over the six horizons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub y: [u8; HORIZONS],
    /// Months from observation to default, when the firm defaulted.
    pub default_offset_months: Option<f64>,
}

impl TargetVector {
    pub fn is_monotone(&self) -> bool {
        self.y.windows(2).all(|p| p[0] <= p[1])
    }

    pub fn as_f64(&self) -> [f64; HORIZONS] {
        self.y.map(f64::from)
    }
}

const DAYS_PER_MONTH: f64 = 365.25 / 12.0;

/// `y[h] = 1` iff the default falls on or before `observation + horizon months`.
pub fn build_targets(observation: NaiveDate, default: Option<NaiveDate>) -> Result<TargetVector> {
    let Some(d) = default else {
        return Ok(TargetVector { y: [0; HORIZONS], default_offset_months: None });
    };
    if d < observation {
        return Err(Error::invalid(format!("default date {d} precedes observation date {observation}")));
    }
    let mut y = [0u8; HORIZONS];
    for (slot, &m) in y.iter_mut().zip(&HORIZON_MONTHS) {
        let limit = observation
            .checked_add_months(Months::new(m))
            .ok_or_else(|| Error::invalid(format!("date overflow adding {m} months to {observation}")))?;
        *slot = u8::from(d <= limit);
    }
    let offset = (d - observation).num_days() as f64 / DAYS_PER_MONTH;
    Ok(TargetVector { y, default_offset_months: Some(offset) })
}
