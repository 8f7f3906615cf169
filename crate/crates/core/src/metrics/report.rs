use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::auc::roc_auc;
use crate::data::{Channel, Dataset, PreparedSet};
use crate::error::{Error, Result};
use crate::fusion::{sigmoid, Checkpoint, MultimodalModel};
use crate::{HORIZONS, HORIZON_LABELS};

/// AUC at one horizon; `auc` is `None` when the labels are single-class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonAuc {
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

/// Per-horizon discrimination plus the cross-horizon average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub horizons: [HorizonAuc; HORIZONS],
    /// Mean of the available horizon AUCs.
    pub average: Option<f64>,
}

/// Column names of a report row.
pub const REPORT_COLUMNS: [&str; HORIZONS + 1] = ["Average", "d_3m", "d_6m", "d_9m", "d_1y", "d_2y", "d_3y"];

pub(crate) fn fmt_na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl HorizonReport {
    /// Score rows against 0/1 target rows.
    pub fn from_scores(scores: &[[f64; HORIZONS]], targets: &[[f64; HORIZONS]]) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::invalid(format!("{} score rows vs {} target rows", scores.len(), targets.len())));
        }
        let mut horizons = [HorizonAuc { auc: None, positives: 0, negatives: 0 }; HORIZONS];
        for (h, slot) in horizons.iter_mut().enumerate() {
            let s: Vec<f64> = scores.iter().map(|r| r[h]).collect();
            let y: Vec<bool> = targets.iter().map(|r| r[h] > 0.5).collect();
            let positives = y.iter().filter(|v| **v).count();
            let auc = match roc_auc(&s, &y) {
                Ok(a) => Some(a),
                Err(Error::SingleClass) => {
                    log::warn!("horizon {} has a single class; AUC reported as NA", HORIZON_LABELS[h]);
                    None
                }
                Err(e) => return Err(e),
            };
            *slot = HorizonAuc { auc, positives, negatives: y.len() - positives };
        }
        Ok(Self { average: mean_available(horizons.iter().map(|h| h.auc)), horizons })
    }

    /// `[Average, d_3m, ..., d_3y]`.
    pub fn row(&self) -> [Option<f64>; HORIZONS + 1] {
        let mut out = [self.average; HORIZONS + 1];
        for (h, v) in self.horizons.iter().enumerate() {
            out[h + 1] = v.auc;
        }
        out
    }

    pub fn csv_header() -> String {
        format!("model,{}", REPORT_COLUMNS.join(","))
    }

    pub fn csv_row(&self, name: &str) -> String {
        let cells: Vec<String> = self.row().iter().map(|v| fmt_na(*v)).collect();
        format!("{name},{}", cells.join(","))
    }

    /// Header plus one row per named report.
    pub fn to_csv(rows: &[(String, HorizonReport)]) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for (name, r) in rows {
            let _ = writeln!(out, "{}", r.csv_row(name));
        }
        out
    }
}

pub(crate) fn mean_available(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Score a checkpoint on observations of `ds`.
pub fn evaluate(ck: &Checkpoint, ds: &Dataset, idx: &[usize]) -> Result<HorizonReport> {
    let preds = ck.predict(ds, idx, false)?;
    let scores: Vec<[f64; HORIZONS]> = preds.iter().map(|p| p.probabilities).collect();
    HorizonReport::from_scores(&scores, &ds.targets(idx))
}

/// Score prepared rows with a model restricted to `active` channels.
pub fn evaluate_model(model: &MultimodalModel, data: &PreparedSet, active: &[Channel], chunk: usize) -> Result<HorizonReport> {
    let scores: Vec<[f64; HORIZONS]> = model.logits(data, active, chunk)?.into_iter().map(|z| z.map(sigmoid)).collect();
    let targets: Vec<[f64; HORIZONS]> =
        data.targets.data().chunks(HORIZONS).map(|r| r.try_into().expect("six targets")).collect();
    HorizonReport::from_scores(&scores, &targets)
}
