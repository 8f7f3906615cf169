use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Channel, ChannelPanel, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::HORIZONS;

pub const CLAMP: f64 = 6.0;

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Robust location and scale per feature of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl ChannelStats {
    /// Fit from per-feature columns of observed (non-missing) values.
    pub fn from_columns(mut columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("fit_preprocess: no features"));
        }
        let mut median = Vec::with_capacity(columns.len());
        let mut iqr = Vec::with_capacity(columns.len());
        for (j, col) in columns.iter_mut().enumerate() {
            if col.is_empty() {
                return Err(Error::invalid(format!("fit_preprocess: feature {j} has no observed values")));
            }
            col.sort_by(f64::total_cmp);
            median.push(quantile(col, 0.5));
            iqr.push(quantile(col, 0.75) - quantile(col, 0.25));
        }
        let degenerate = iqr.iter().map(|&q| q <= 0.0).collect();
        Ok(Self { median, iqr, degenerate })
    }

    pub fn features(&self) -> usize {
        self.median.len()
    }

    /// Scaled and clamped value of feature `j`.
    pub fn scale(&self, j: usize, x: f64) -> f64 {
        let c = x - self.median[j];
        let z = if self.degenerate[j] { c } else { c / self.iqr[j] };
        z.clamp(-CLAMP, CLAMP)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub channels: BTreeMap<Channel, ChannelStats>,
}

impl PreprocessStats {
    pub fn get(&self, c: Channel) -> Result<&ChannelStats> {
        self.channels.get(&c).ok_or_else(|| Error::invalid(format!("no preprocessing stats for {c}")))
    }
}

/// Fit medians and IQRs on the series rows covered by the given observations'
/// windows. Each underlying row counts once even when windows overlap.
pub fn fit_preprocess(ds: &Dataset, idx: &[usize]) -> Result<PreprocessStats> {
    if idx.is_empty() {
        return Err(Error::invalid("fit_preprocess: empty training set"));
    }
    let mut channels = BTreeMap::new();
    for &c in &ds.channels {
        let f = ds.feature_count(c)?;
        let mut covered: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
        for &i in idx {
            let firm = ds.observations[i].firm;
            let (lo, hi) = ds.window_range(i, c)?;
            let mask = covered.entry(firm).or_insert_with(|| vec![false; ds.firms[firm].series[&c].len()]);
            mask[lo..hi].fill(true);
        }
        let mut columns = vec![Vec::new(); f];
        for (firm, mask) in covered {
            let s = &ds.firms[firm].series[&c];
            for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                for (j, col) in columns.iter_mut().enumerate() {
                    if !s.missing[r * f + j] {
                        col.push(s.values[r * f + j]);
                    }
                }
            }
        }
        let stats = ChannelStats::from_columns(columns)?;
        for (j, d) in stats.degenerate.iter().enumerate() {
            if *d {
                log::warn!("{c} feature {j} has zero IQR on the training split");
            }
        }
        channels.insert(c, stats);
    }
    Ok(PreprocessStats { channels })
}

fn write_scaled(values: &[f64], missing: &[bool], f: usize, stats: &ChannelStats, out: &mut [f64]) {
    let rows = values.len() / f.max(1);
    for r in 0..rows {
        for j in 0..f {
            let k = r * f + j;
            let o = r * 2 * f;
            if missing[k] {
                out[o + j] = 0.0;
                out[o + f + j] = 1.0;
            } else {
                out[o + j] = stats.scale(j, values[k]);
                out[o + f + j] = 0.0;
            }
        }
    }
}

/// Scale, clamp, impute and append one indicator column per feature: `w x 2f`.
pub fn apply_preprocess(panel: &ChannelPanel, stats: &ChannelStats) -> Result<Tensor> {
    let [w, f] = *panel.values.shape() else {
        return Err(Error::shape("apply_preprocess", format!("panel must be 2-D, got {:?}", panel.values.shape())));
    };
    if f != stats.features() {
        return Err(Error::shape("apply_preprocess", format!("{} has {f} features, stats have {}", panel.channel, stats.features())));
    }
    let mut out = vec![0.0; w * 2 * f];
    write_scaled(panel.values.data(), &panel.missing_mask, f, stats, &mut out);
    Tensor::new(vec![w, 2 * f], out)
}

/// Preprocessed windows of one channel for a set of observations: `[n, w, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub n: usize,
    pub w: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ChannelMatrix {
    /// Stack the given rows into a `[B, w, cols]` batch.
    pub fn batch(&self, rows: &[usize]) -> Tensor {
        let stride = self.w * self.cols;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        Tensor::new(vec![rows.len(), self.w, self.cols], data).expect("batch shape")
    }

    /// Mask time steps as if their values were missing: scaled value 0 and indicator 1.
    pub fn ablate_steps(&mut self, steps: Range<usize>) {
        let f = self.cols / 2;
        let stride = self.w * self.cols;
        for r in 0..self.n {
            for t in steps.clone() {
                let o = r * stride + t * self.cols;
                self.data[o..o + f].fill(0.0);
                self.data[o + f..o + 2 * f].fill(1.0);
            }
        }
    }
}

/// Preprocessed inputs and targets for a list of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub obs: Vec<usize>,
    pub channels: BTreeMap<Channel, ChannelMatrix>,
    /// `[n, 6]`.
    pub targets: Tensor,
}

impl PreparedSet {
    pub fn build(ds: &Dataset, stats: &PreprocessStats, idx: &[usize]) -> Result<Self> {
        let mut channels = BTreeMap::new();
        for &c in &ds.channels {
            let st = stats.get(c)?;
            let f = ds.feature_count(c)?;
            if f != st.features() {
                return Err(Error::shape("prepare", format!("{c} has {f} features, stats have {}", st.features())));
            }
            let w = ds.windows.of(c);
            let stride = w * 2 * f;
            let mut data = vec![0.0; idx.len() * stride];
            for (k, &i) in idx.iter().enumerate() {
                let s = &ds.firms[ds.observations[i].firm].series[&c];
                let (lo, hi) = ds.window_range(i, c)?;
                write_scaled(&s.values[lo * f..hi * f], &s.missing[lo * f..hi * f], f, st, &mut data[k * stride..(k + 1) * stride]);
            }
            channels.insert(c, ChannelMatrix { n: idx.len(), w, cols: 2 * f, data });
        }
        let targets: Vec<f64> = ds.targets(idx).into_iter().flatten().collect();
        Ok(Self { obs: idx.to_vec(), channels, targets: Tensor::new(vec![idx.len(), HORIZONS], targets)? })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn channel(&self, c: Channel) -> Result<&ChannelMatrix> {
        self.channels.get(&c).ok_or_else(|| Error::invalid(format!("prepared set has no {c} channel")))
    }

    pub fn target_rows(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * HORIZONS);
        for &r in rows {
            data.extend_from_slice(&self.targets.data()[r * HORIZONS..(r + 1) * HORIZONS]);
        }
        Tensor::new(vec![rows.len(), HORIZONS], data).expect("target shape")
    }

    /// Label column for one horizon.
    pub fn labels(&self, h: usize) -> Vec<bool> {
        (0..self.len()).map(|r| self.targets.data()[r * HORIZONS + h] > 0.5).collect()
    }
}
