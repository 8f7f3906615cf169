use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{evaluate, fmt_na, mean_available, HorizonReport, REPORT_COLUMNS};
use crate::data::{assign_folds, split_from_folds, Channel, Dataset, Windows};
use crate::error::{Error, Result};
use crate::fusion::{fit, MultimodalSpec, Regime, RegimeSchedule, TrainConfig};
use crate::nets::NetConfig;
use crate::HORIZONS;

/// Mean and sample standard deviation per report column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub mean: [Option<f64>; HORIZONS + 1],
    pub std: [Option<f64>; HORIZONS + 1],
    /// Folds contributing to each column.
    pub counts: [usize; HORIZONS + 1],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<HorizonReport>,
    pub summary: CvSummary,
}

/// Column statistics over fold reports; NA entries are excluded.
pub fn summarize_folds(folds: &[HorizonReport]) -> CvSummary {
    let mut mean = [None; HORIZONS + 1];
    let mut std = [None; HORIZONS + 1];
    let mut counts = [0; HORIZONS + 1];
    for col in 0..=HORIZONS {
        let vals: Vec<f64> = folds.iter().filter_map(|f| f.row()[col]).collect();
        counts[col] = vals.len();
        if vals.len() < folds.len() {
            log::warn!("{}: {} of {} folds are NA and were excluded", REPORT_COLUMNS[col], folds.len() - vals.len(), folds.len());
        }
        let m = mean_available(vals.iter().copied().map(Some));
        mean[col] = m;
        if let Some(m) = m {
            if vals.len() >= 2 {
                let ss: f64 = vals.iter().map(|v| (v - m).powi(2)).sum();
                std[col] = Some((ss / (vals.len() - 1) as f64).sqrt());
            }
        }
    }
    CvSummary { mean, std, counts }
}

impl CvSummary {
    /// Cells formatted as `mean (std)`.
    pub fn cells(&self) -> Vec<String> {
        (0..=HORIZONS)
            .map(|c| match (self.mean[c], self.std[c]) {
                (Some(m), Some(s)) => format!("{m:.3} ({s:.3})"),
                (Some(m), None) => format!("{m:.3} (NA)"),
                _ => "NA".to_string(),
            })
            .collect()
    }
}

impl CvReport {
    pub fn to_csv(&self, name: &str) -> String {
        let mut out = format!("model,{}\n", REPORT_COLUMNS.join(","));
        let _ = writeln!(out, "{name},{}", self.summary.cells().iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(","));
        out
    }

    /// Per-fold rows, useful for auditing the summary.
    pub fn folds_csv(&self) -> String {
        let mut out = format!("fold,{}\n", REPORT_COLUMNS.join(","));
        for (i, f) in self.folds.iter().enumerate() {
            let cells: Vec<String> = f.row().iter().map(|v| fmt_na(*v)).collect();
            let _ = writeln!(out, "{i},{}", cells.join(","));
        }
        out
    }
}

/// Stratified company-level k-fold: fold `i` is the test set and fold
/// `(i + 1) % k` the validation set. Folds run in parallel.
pub fn cross_validate(
    ds: &Dataset,
    k: usize,
    spec: &MultimodalSpec,
    schedule: &RegimeSchedule,
    config: &TrainConfig,
    seed: u64,
) -> Result<CvReport> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let folds = assign_folds(&ds.firm_default_flags(), k, seed)?;
    let reports = (0..k)
        .into_par_iter()
        .map(|i| {
            let split = split_from_folds(ds, &folds, i, (i + 1) % k)?;
            let ck = fit(ds, &split, spec.clone(), schedule, config, seed)?;
            let r = evaluate(&ck, ds, &split.test)?;
            log::info!("fold {i}: average AUC {}", fmt_na(r.average));
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport { k, summary: summarize_folds(&reports), folds: reports })
}

/// Named pricing lookbacks in trading days.
pub const WINDOW_SIZES: [(&str, usize); 5] = [("3m", 63), ("6m", 126), ("9m", 189), ("1y", 252), ("2y", 504)];

pub fn window_label(days: usize) -> String {
    WINDOW_SIZES.iter().find(|(_, d)| *d == days).map_or_else(|| format!("{days}d"), |(l, _)| l.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub window: usize,
    pub observations: usize,
    pub dropped: usize,
    pub report: HorizonReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub net: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// One row per horizon (plus Average), one column per window size.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon");
        for p in &self.points {
            let _ = write!(out, ",{}", window_label(p.window));
        }
        out.push('\n');
        for (col, name) in REPORT_COLUMNS.iter().enumerate() {
            out.push_str(name);
            for p in &self.points {
                let _ = write!(out, ",{}", fmt_na(p.report.row()[col]));
            }
            out.push('\n');
        }
        out
    }
}

/// Settings shared by every point of a window sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub net: NetConfig,
    pub hidden: usize,
    pub max_epochs: usize,
    pub train: TrainConfig,
}

/// Train a pricing-only model for each lookback and evaluate it on the holdout split.
pub fn window_sweep(ds: &Dataset, settings: &SweepSettings, sizes: &[usize], seed: u64) -> Result<SweepReport> {
    if sizes.is_empty() {
        return Err(Error::invalid("window sweep needs at least one size"));
    }
    if !ds.has_channel(Channel::Pricing) {
        return Err(Error::invalid("window sweep needs the pricing channel"));
    }
    let mut pricing_only = ds.clone();
    for c in ds.channels.iter().filter(|c| **c != Channel::Pricing) {
        pricing_only = pricing_only.without_channel(*c);
    }
    let schedule = RegimeSchedule::preset(Regime::R2, &[Channel::Pricing], settings.max_epochs)?;
    let configs = BTreeMap::from([(Channel::Pricing, settings.net.clone())]);
    let points = sizes
        .par_iter()
        .map(|&window| {
            let sized = pricing_only.with_windows(Windows { pricing_days: window, ..ds.windows })?;
            let dropped = sized.dropped.insufficient_history.get(&Channel::Pricing).copied().unwrap_or(0);
            if dropped > 0 {
                log::warn!("window {window}: {dropped} observations dropped for insufficient pricing history");
            }
            let split = crate::data::Split::holdout(&sized, seed)?;
            let spec = MultimodalSpec::for_dataset(&sized, settings.hidden, &configs)?;
            let ck = fit(&sized, &split, spec, &schedule, &settings.train, seed)?;
            let report = evaluate(&ck, &sized, &split.test)?;
            Ok(SweepPoint { window, observations: sized.len(), dropped, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { net: settings.net.kind().to_string(), points })
}
