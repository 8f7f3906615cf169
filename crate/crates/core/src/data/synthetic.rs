//! Controllable panel generator.
//!
//! Each firm carries a latent AR(1) health series `h`. A market latent mixes a
//! shared factor with a firm-specific AR(1) component. Default is drawn
//! quarter by quarter from `logistic(-a_f h - a_m m + base)`, starting at the
//! first observation quarter. Fundamentals are noisy linear readouts of `h`,
//! market features read the shared factor and the firm's market latent, and
//! daily log prices follow a random walk whose drift is `a_p * drift_scale * h`.

use std::collections::HashMap;

use chrono::{Datelike, Days, Months, NaiveDate, Weekday};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabelRow, PriceRow, QuarterRow, RawData};
use crate::error::{Error, Result};
use crate::rng::{named_rng, Rng};

/// A dependence planted at a fixed lag: a fundamental shock at quarter `e`
/// followed by a default within three months of report `e + lag`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Planted {
    pub lag: usize,
    /// Share of firms carrying the pattern.
    pub fraction: f64,
    /// Shock size in units of the health latent.
    #[serde(default = "default_shock")]
    pub shock: f64,
}

fn default_shock() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub firms: usize,
    /// Quarters of history before (and including) the first observation.
    pub history_quarters: usize,
    pub observation_quarters: usize,
    /// Quarters simulated after the last observation so every label is complete.
    pub follow_up_quarters: usize,
    /// Trading days of prices available before the first observation.
    pub pricing_days: usize,
    pub fundamental_features: usize,
    pub market_index_features: usize,
    pub market_firm_features: usize,
    /// Pure-noise quarterly features; zero disables the auxiliary channel.
    pub auxiliary_features: usize,
    pub alpha_fundamental: f64,
    pub alpha_market: f64,
    pub alpha_pricing: f64,
    pub base_hazard: f64,
    pub persistence: f64,
    pub market_persistence: f64,
    /// Weight of the shared factor in the market latent, in `[0, 1]`.
    pub market_common: f64,
    pub fundamental_noise: f64,
    pub market_noise: f64,
    pub volatility: f64,
    pub drift_scale: f64,
    pub missing_rate: f64,
    pub start_year: i32,
    pub planted: Option<Planted>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            firms: 500,
            history_quarters: 12,
            observation_quarters: 16,
            follow_up_quarters: 12,
            pricing_days: 504,
            fundamental_features: 10,
            market_index_features: 4,
            market_firm_features: 4,
            auxiliary_features: 0,
            alpha_fundamental: 2.5,
            alpha_market: 1.0,
            alpha_pricing: 0.5,
            base_hazard: -7.0,
            persistence: 0.9,
            market_persistence: 0.8,
            market_common: 0.3,
            fundamental_noise: 1.0,
            market_noise: 0.5,
            volatility: 0.02,
            drift_scale: 0.004,
            missing_rate: 0.02,
            start_year: 2000,
            planted: None,
        }
    }
}

impl GenConfig {
    /// All signal strengths zero: defaults are independent of every feature.
    pub fn null(&self) -> Self {
        Self { alpha_fundamental: 0.0, alpha_market: 0.0, alpha_pricing: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("firms", self.firms),
            ("history_quarters", self.history_quarters),
            ("observation_quarters", self.observation_quarters),
            ("pricing_days", self.pricing_days),
            ("fundamental_features", self.fundamental_features),
            ("market_index_features + market_firm_features", self.market_index_features + self.market_firm_features),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("generator: {name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.persistence.abs()) || !(0.0..1.0).contains(&self.market_persistence.abs()) {
            return Err(Error::invalid("generator: persistence must lie in (-1, 1)"));
        }
        if !(0.0..=1.0).contains(&self.market_common) || !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::invalid("generator: market_common in [0, 1] and missing_rate in [0, 1) required"));
        }
        if let Some(p) = self.planted {
            if p.lag == 0 || p.lag >= self.history_quarters || !(0.0..=1.0).contains(&p.fraction) {
                return Err(Error::invalid("generator: planted lag must be in [1, history_quarters) and fraction in [0, 1]"));
            }
        }
        Ok(())
    }

    fn first_obs(&self) -> usize {
        self.history_quarters - 1
    }

    fn last_obs(&self) -> usize {
        self.first_obs() + self.observation_quarters - 1
    }

    fn horizon_end(&self) -> usize {
        self.last_obs() + self.follow_up_quarters.max(12)
    }
}

/// Generator latents at one firm-quarter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub health: f64,
    pub market: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub raw: RawData,
    pub latent: HashMap<(String, NaiveDate), Latent>,
    pub config: GenConfig,
}

impl GeneratedData {
    /// True hazard logit per firm-quarter; `-h` when every alpha is zero.
    pub fn oracle(&self) -> HashMap<(String, NaiveDate), f64> {
        let (af, am) = (self.config.alpha_fundamental, self.config.alpha_market);
        self.latent
            .iter()
            .map(|(k, l)| {
                let s = if af == 0.0 && am == 0.0 { -l.health } else { -af * l.health - am * l.market };
                (k.clone(), s)
            })
            .collect()
    }
}

fn quarter_end(start_year: i32, q: usize) -> NaiveDate {
    let first = NaiveDate::from_ymd_opt(start_year, 4, 1).expect("valid start year");
    let next = first.checked_add_months(Months::new(3 * q as u32)).expect("date in range");
    next.pred_opt().expect("date in range")
}

fn is_trading_day(d: NaiveDate) -> bool {
    !matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn ar1(rng: &mut Rng, n: usize, phi: f64) -> Vec<f64> {
    let sd = (1.0 - phi * phi).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut x = normal(rng);
    for _ in 0..n {
        out.push(x);
        x = phi * x + sd * normal(rng);
    }
    out
}

fn round_to(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

/// Per-feature readout `scale * (load * latent + noise) + offset`.
struct Readout {
    load: f64,
    scale: f64,
    offset: f64,
}

impl Readout {
    fn draw(rng: &mut Rng) -> Self {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        Self {
            load: sign * rng.random_range(0.5..1.5),
            scale: 10f64.powf(rng.random_range(-1.0..2.0)),
            offset: rng.random_range(-5.0..5.0),
        }
    }

    fn read(&self, latent: f64, noise: f64) -> f64 {
        round_to(self.scale * (self.load * latent + noise) + self.offset, 6)
    }
}

/// Simulate firms, channels and default dates. Deterministic in `seed`.
pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<GeneratedData> {
    cfg.validate()?;
    let nq = cfg.horizon_end() + 1;
    let dates: Vec<NaiveDate> = (0..nq).map(|q| quarter_end(cfg.start_year, q)).collect();
    let first_obs = cfg.first_obs();
    let last_obs = cfg.last_obs();

    let mut setup = named_rng(seed, "gen/setup");
    let fund: Vec<Readout> = (0..cfg.fundamental_features).map(|_| Readout::draw(&mut setup)).collect();
    let index: Vec<Readout> = (0..cfg.market_index_features).map(|_| Readout::draw(&mut setup)).collect();
    let mkt: Vec<Readout> = (0..cfg.market_firm_features).map(|_| Readout::draw(&mut setup)).collect();
    let aux: Vec<Readout> = (0..cfg.auxiliary_features).map(|_| Readout::draw(&mut setup)).collect();
    let common = ar1(&mut named_rng(seed, "gen/common"), nq, cfg.market_persistence);
    let mut index_rng = named_rng(seed, "gen/index");
    let index_rows: Vec<Vec<f64>> =
        common.iter().map(|&s| index.iter().map(|r| r.read(s, cfg.market_noise * normal(&mut index_rng))).collect()).collect();

    // Trading calendar: enough weekdays before the first observation, through the last one.
    let mut day = dates[first_obs];
    let mut back = 0;
    while back < cfg.pricing_days + 5 {
        day = day.pred_opt().expect("date in range");
        if is_trading_day(day) {
            back += 1;
        }
    }
    let mut calendar = Vec::new();
    while day <= dates[last_obs] {
        if is_trading_day(day) {
            calendar.push(day);
        }
        day = day.succ_opt().expect("date in range");
    }
    // Days in (dates[q-1], dates[q]] belong to quarter q; earlier days to quarter 0.
    let day_quarter: Vec<usize> = calendar.iter().map(|d| dates.partition_point(|q| q < d)).collect();

    let mut raw = RawData { auxiliary: (cfg.auxiliary_features > 0).then(Vec::new), ..RawData::default() };
    let mut latent = HashMap::new();
    let (wm, wu) = (cfg.market_common.sqrt(), (1.0 - cfg.market_common).sqrt());

    for i in 0..cfg.firms {
        let id = format!("F{:04}", i + 1);
        let mut rng = named_rng(seed, &format!("gen/firm/{i}"));
        let h = ar1(&mut rng, nq, cfg.persistence);
        let u = ar1(&mut rng, nq, cfg.market_persistence);
        let m: Vec<f64> = (0..nq).map(|q| wm * common[q] + wu * u[q]).collect();

        let mut default = None;
        for q in first_obs..cfg.horizon_end() {
            let p = logistic(-cfg.alpha_fundamental * h[q] - cfg.alpha_market * m[q] + cfg.base_hazard);
            if rng.random::<f64>() < p {
                let span = (dates[q + 1] - dates[q]).num_days() as u64;
                default = Some(dates[q] + Days::new(rng.random_range(1..=span)));
                break;
            }
        }
        let mut shock_at = None;
        if let Some(pl) = cfg.planted {
            if rng.random::<f64>() < pl.fraction {
                let lo = first_obs.saturating_sub(pl.lag);
                let e = rng.random_range(lo..=last_obs - pl.lag);
                let report = dates[e + pl.lag];
                let span = (report.checked_add_months(Months::new(3)).expect("date in range") - report).num_days() as u64;
                default = Some(report + Days::new(rng.random_range(1..=span)));
                shock_at = Some((e, pl.shock));
            }
        }

        for q in 0..=last_obs {
            if default.is_some_and(|d| d <= dates[q]) {
                break;
            }
            let stress = if h[q] < -1.0 { 3.0 } else { 1.0 };
            let miss = |rng: &mut Rng| rng.random::<f64>() < cfg.missing_rate * stress;
            let reported = match shock_at {
                Some((e, s)) if e == q => h[q] - s,
                _ => h[q],
            };
            let values = fund
                .iter()
                .map(|r| {
                    let v = r.read(reported, cfg.fundamental_noise * normal(&mut rng));
                    (!miss(&mut rng)).then_some(v)
                })
                .collect();
            raw.fundamental.push(QuarterRow { firm_id: id.clone(), date: dates[q], values });

            let mut values: Vec<Option<f64>> = index_rows[q].iter().map(|&v| Some(v)).collect();
            for r in &mkt {
                let v = r.read(m[q], cfg.market_noise * normal(&mut rng));
                values.push((!miss(&mut rng)).then_some(v));
            }
            raw.market.push(QuarterRow { firm_id: id.clone(), date: dates[q], values });

            if let Some(rows) = raw.auxiliary.as_mut() {
                let values = aux.iter().map(|r| Some(r.read(0.0, normal(&mut rng)))).collect();
                rows.push(QuarterRow { firm_id: id.clone(), date: dates[q], values });
            }
            latent.insert((id.clone(), dates[q]), Latent { health: h[q], market: m[q] });
        }

        let mut x = 20f64.ln() + 0.1 * normal(&mut rng);
        for (d, &q) in calendar.iter().zip(&day_quarter) {
            if default.is_some_and(|dd| dd <= *d) {
                break;
            }
            x += cfg.alpha_pricing * cfg.drift_scale * h[q] + cfg.volatility * normal(&mut rng);
            let close = x.exp();
            let up = (cfg.volatility * 0.5 * normal(&mut rng).abs()).exp();
            let down = (-cfg.volatility * 0.5 * normal(&mut rng).abs()).exp();
            let close_r = round_to(close, 4).max(1e-4);
            raw.pricing.push(PriceRow {
                firm_id: id.clone(),
                date: *d,
                high: round_to(close * up, 4).max(close_r),
                low: round_to(close * down, 4).clamp(1e-4, close_r),
                close: close_r,
            });
        }
        raw.labels.push(LabelRow { firm_id: id, default_date: default });
    }
    Ok(GeneratedData { raw, latent, config: cfg.clone() })
}
