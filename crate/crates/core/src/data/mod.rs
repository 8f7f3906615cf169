//! Panel data: raw channel rows, per-firm series, observations with their
//! targets, preprocessing, fold assignment, CSV input/output and the
//! synthetic generator.

mod csvio;
mod folds;
mod preprocess;
mod synthetic;
mod targets;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::HORIZONS;

pub use csvio::{load_channels, write_channels, ChannelPaths};
pub use folds::{assign_folds, split_from_folds, FoldAssignment, Split};
pub use preprocess::{apply_preprocess, fit_preprocess, quantile, ChannelMatrix, ChannelStats, PreparedSet, PreprocessStats};
pub use synthetic::{generate_synthetic, GenConfig, GeneratedData, Planted};
pub use targets::{build_targets, TargetVector};

/// A data source feeding one channel model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Fundamental,
    Market,
    Pricing,
    /// Extra quarterly channel with the market schema, used for noise-player checks.
    Auxiliary,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Fundamental, Channel::Market, Channel::Pricing, Channel::Auxiliary];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Fundamental => "fundamental",
            Channel::Market => "market",
            Channel::Pricing => "pricing",
            Channel::Auxiliary => "auxiliary",
        }
    }

    pub fn is_daily(self) -> bool {
        self == Channel::Pricing
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown channel `{s}`")))
    }
}

/// One quarterly report row; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarterRow {
    pub firm_id: String,
    pub date: NaiveDate,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub firm_id: String,
    pub date: NaiveDate,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub firm_id: String,
    pub default_date: Option<NaiveDate>,
}

/// Channel tables as they appear on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawData {
    pub fundamental: Vec<QuarterRow>,
    pub market: Vec<QuarterRow>,
    pub pricing: Vec<PriceRow>,
    pub auxiliary: Option<Vec<QuarterRow>>,
    pub labels: Vec<LabelRow>,
}

impl RawData {
    pub fn channels(&self) -> Vec<Channel> {
        let mut out = vec![Channel::Fundamental, Channel::Market, Channel::Pricing];
        if self.auxiliary.is_some() {
            out.push(Channel::Auxiliary);
        }
        out
    }
}

/// Date-ordered rows of one channel for one firm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub dates: Vec<NaiveDate>,
    pub width: usize,
    /// Row-major `dates.len() x width`; missing cells hold 0.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl Series {
    fn new(width: usize) -> Self {
        Self { dates: Vec::new(), width, values: Vec::new(), missing: Vec::new() }
    }

    fn push(&mut self, date: NaiveDate, row: impl IntoIterator<Item = Option<f64>>) {
        self.dates.push(date);
        for v in row {
            self.values.push(v.unwrap_or(0.0));
            self.missing.push(v.is_none());
        }
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Number of rows dated on or before `date`.
    pub fn end_at(&self, date: NaiveDate) -> usize {
        self.dates.partition_point(|d| *d <= date)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Firm {
    pub id: String,
    pub default_date: Option<NaiveDate>,
    pub series: BTreeMap<Channel, Series>,
}

/// One firm at one reporting date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub firm: usize,
    pub date: NaiveDate,
    /// Exclusive end row of each channel's window in the firm's series.
    pub ends: BTreeMap<Channel, usize>,
    pub target: TargetVector,
}

/// Window lengths: quarterly channels in quarters, pricing in trading days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Windows {
    pub quarters: usize,
    pub pricing_days: usize,
}

impl Default for Windows {
    fn default() -> Self {
        Self { quarters: 12, pricing_days: 504 }
    }
}

impl Windows {
    pub fn of(&self, channel: Channel) -> usize {
        if channel.is_daily() {
            self.pricing_days
        } else {
            self.quarters
        }
    }
}

/// Why candidate observations were left out.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub insufficient_history: BTreeMap<Channel, usize>,
    pub after_default: usize,
    pub unlabeled_firms: usize,
    pub unknown_label_firms: usize,
}

impl DropReport {
    pub fn total_history(&self) -> usize {
        self.insufficient_history.values().sum()
    }
}

/// One observation's input matrix for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPanel {
    pub firm_id: String,
    pub observation_date: NaiveDate,
    pub channel: Channel,
    /// `w x f`, oldest row first; missing cells hold 0.
    pub values: Tensor,
    pub missing_mask: Vec<bool>,
    pub dates: Vec<NaiveDate>,
}

/// Assembled observations over per-firm series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub firms: Vec<Firm>,
    pub observations: Vec<Observation>,
    pub windows: Windows,
    pub channels: Vec<Channel>,
    pub features: BTreeMap<Channel, usize>,
    pub dropped: DropReport,
    /// Generator-side risk score per observation, when known.
    pub oracle: Option<Vec<f64>>,
}

fn group_quarters(rows: &[QuarterRow], index: &HashMap<String, usize>, series: &mut [BTreeMap<Channel, Series>], channel: Channel) -> Result<usize> {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut per_firm: Vec<Vec<&QuarterRow>> = vec![Vec::new(); series.len()];
    for r in rows {
        if r.values.len() != width {
            return Err(Error::invalid(format!("{channel}: ragged row for {} on {}", r.firm_id, r.date)));
        }
        if let Some(&i) = index.get(&r.firm_id) {
            per_firm[i].push(r);
        }
    }
    for (i, mut rs) in per_firm.into_iter().enumerate() {
        rs.sort_by_key(|r| r.date);
        let mut s = Series::new(width);
        for r in rs {
            s.push(r.date, r.values.iter().copied());
        }
        series[i].insert(channel, s);
    }
    Ok(width)
}

impl Dataset {
    /// Build observations at every fundamental reporting date with enough
    /// history in every channel. Windows end at the last row dated on or
    /// before the observation date.
    pub fn assemble(raw: &RawData, windows: Windows) -> Result<Self> {
        if windows.quarters == 0 || windows.pricing_days == 0 {
            return Err(Error::invalid("window lengths must be positive"));
        }
        let mut dropped = DropReport::default();
        let mut ids: BTreeSet<&str> = raw.fundamental.iter().map(|r| r.firm_id.as_str()).collect();
        ids.extend(raw.market.iter().map(|r| r.firm_id.as_str()));
        ids.extend(raw.pricing.iter().map(|r| r.firm_id.as_str()));
        let ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
        let index: HashMap<String, usize> = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

        let mut defaults: Vec<Option<NaiveDate>> = vec![None; ids.len()];
        let mut labeled = vec![false; ids.len()];
        for l in &raw.labels {
            match index.get(&l.firm_id) {
                Some(&i) => {
                    defaults[i] = l.default_date;
                    labeled[i] = true;
                }
                None => {
                    log::warn!("labels: firm `{}` has no channel data", l.firm_id);
                    dropped.unknown_label_firms += 1;
                }
            }
        }
        dropped.unlabeled_firms = labeled.iter().filter(|l| !**l).count();
        if dropped.unlabeled_firms > 0 {
            log::warn!("{} firms have no label row and are treated as non-defaulting", dropped.unlabeled_firms);
        }

        let mut series: Vec<BTreeMap<Channel, Series>> = vec![BTreeMap::new(); ids.len()];
        let mut features = BTreeMap::new();
        features.insert(Channel::Fundamental, group_quarters(&raw.fundamental, &index, &mut series, Channel::Fundamental)?);
        features.insert(Channel::Market, group_quarters(&raw.market, &index, &mut series, Channel::Market)?);
        if let Some(aux) = &raw.auxiliary {
            features.insert(Channel::Auxiliary, group_quarters(aux, &index, &mut series, Channel::Auxiliary)?);
        }
        let mut prices: Vec<Vec<&PriceRow>> = vec![Vec::new(); ids.len()];
        for p in &raw.pricing {
            prices[index[&p.firm_id]].push(p);
        }
        for (i, mut ps) in prices.into_iter().enumerate() {
            ps.sort_by_key(|p| p.date);
            let mut s = Series::new(3);
            for p in ps {
                s.push(p.date, [Some(p.high), Some(p.low), Some(p.close)]);
            }
            series[i].insert(Channel::Pricing, s);
        }
        features.insert(Channel::Pricing, 3);

        let firms = ids
            .into_iter()
            .zip(defaults)
            .zip(series)
            .map(|((id, default_date), series)| Firm { id, default_date, series })
            .collect();
        let mut ds = Self { firms, observations: Vec::new(), windows, channels: raw.channels(), features, dropped, oracle: None };
        ds.rebuild_observations()?;
        if ds.dropped.total_history() > 0 {
            log::info!("dropped {} observations lacking minimum history", ds.dropped.total_history());
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn has_channel(&self, c: Channel) -> bool {
        self.channels.contains(&c)
    }

    pub fn feature_count(&self, c: Channel) -> Result<usize> {
        self.features.get(&c).copied().ok_or_else(|| Error::invalid(format!("dataset has no {c} channel")))
    }

    /// Same data with different window lengths; observations are rebuilt.
    pub fn with_windows(&self, windows: Windows) -> Result<Self> {
        if windows.quarters == 0 || windows.pricing_days == 0 {
            return Err(Error::invalid("window lengths must be positive"));
        }
        let mut out = self.clone();
        out.windows = windows;
        out.rebuild_observations()?;
        Ok(out)
    }

    fn rebuild_observations(&mut self) -> Result<()> {
        let oracle: Option<HashMap<(usize, NaiveDate), f64>> = self
            .oracle
            .as_ref()
            .map(|o| self.observations.iter().zip(o).map(|(ob, v)| ((ob.firm, ob.date), *v)).collect());
        let mut dropped = DropReport {
            unlabeled_firms: self.dropped.unlabeled_firms,
            unknown_label_firms: self.dropped.unknown_label_firms,
            ..DropReport::default()
        };
        let mut observations = Vec::new();
        for (fi, firm) in self.firms.iter().enumerate() {
            let Some(fund) = firm.series.get(&Channel::Fundamental) else { continue };
            'dates: for &date in &fund.dates {
                if firm.default_date.is_some_and(|d| d < date) {
                    dropped.after_default += 1;
                    continue;
                }
                let mut ends = BTreeMap::new();
                for &c in &self.channels {
                    let end = firm.series.get(&c).map_or(0, |s| s.end_at(date));
                    if end < self.windows.of(c) {
                        *dropped.insufficient_history.entry(c).or_insert(0) += 1;
                        continue 'dates;
                    }
                    ends.insert(c, end);
                }
                let target = build_targets(date, firm.default_date)?;
                observations.push(Observation { firm: fi, date, ends, target });
            }
        }
        self.oracle = oracle.map(|m| observations.iter().map(|o| m.get(&(o.firm, o.date)).copied().unwrap_or(f64::NAN)).collect());
        self.observations = observations;
        self.dropped = dropped;
        Ok(())
    }

    /// Drop a channel from every observation. The series stay in place,
    /// since fundamental report dates anchor the observations.
    pub fn without_channel(&self, c: Channel) -> Self {
        let mut out = self.clone();
        out.channels.retain(|x| *x != c);
        out.features.remove(&c);
        for o in &mut out.observations {
            o.ends.remove(&c);
        }
        out
    }

    /// Attach a generator risk score keyed by `(firm_id, date)`.
    pub fn attach_oracle(&mut self, scores: &HashMap<(String, NaiveDate), f64>) {
        let o = self
            .observations
            .iter()
            .map(|ob| scores.get(&(self.firms[ob.firm].id.clone(), ob.date)).copied().unwrap_or(f64::NAN))
            .collect();
        self.oracle = Some(o);
    }

    /// Rows `[end - w, end)` of the channel series for observation `i`.
    pub fn window_range(&self, i: usize, c: Channel) -> Result<(usize, usize)> {
        let o = &self.observations[i];
        let end = *o.ends.get(&c).ok_or_else(|| Error::invalid(format!("observation has no {c} window")))?;
        Ok((end - self.windows.of(c), end))
    }

    pub fn panel(&self, i: usize, c: Channel) -> Result<ChannelPanel> {
        let o = &self.observations[i];
        let firm = &self.firms[o.firm];
        let s = &firm.series[&c];
        let (lo, hi) = self.window_range(i, c)?;
        let f = s.width;
        Ok(ChannelPanel {
            firm_id: firm.id.clone(),
            observation_date: o.date,
            channel: c,
            values: Tensor::new(vec![hi - lo, f], s.values[lo * f..hi * f].to_vec())?,
            missing_mask: s.missing[lo * f..hi * f].to_vec(),
            dates: s.dates[lo..hi].to_vec(),
        })
    }

    /// Every observation's windows end on or before its date.
    pub fn audit_no_lookahead(&self) -> Result<()> {
        for (i, o) in self.observations.iter().enumerate() {
            for &c in &self.channels {
                let (_, hi) = self.window_range(i, c)?;
                let last = self.firms[o.firm].series[&c].dates[hi - 1];
                if last > o.date {
                    return Err(Error::invalid(format!("{c} window of observation {i} ends {last} after {}", o.date)));
                }
            }
        }
        Ok(())
    }

    /// Ever-defaulted flag per firm, as fold stratification input.
    pub fn firm_default_flags(&self) -> Vec<(String, bool)> {
        self.firms.iter().map(|f| (f.id.clone(), f.default_date.is_some())).collect()
    }

    pub fn targets(&self, idx: &[usize]) -> Vec<[f64; HORIZONS]> {
        idx.iter().map(|&i| self.observations[i].target.as_f64()).collect()
    }

    /// Observation counts and per-horizon positives, for audit reports.
    pub fn summary(&self) -> DatasetSummary {
        let mut positives = [0usize; HORIZONS];
        for o in &self.observations {
            for (p, y) in positives.iter_mut().zip(o.target.y) {
                *p += usize::from(y);
            }
        }
        DatasetSummary {
            firms: self.firms.len(),
            defaulted_firms: self.firms.iter().filter(|f| f.default_date.is_some()).count(),
            observations: self.observations.len(),
            positives,
            dropped: self.dropped.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub firms: usize,
    pub defaulted_firms: usize,
    pub observations: usize,
    pub positives: [usize; HORIZONS],
    pub dropped: DropReport,
}

#[cfg(test)]
mod tests;
