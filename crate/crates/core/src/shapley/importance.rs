use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::game::{shapley_values, ShapleyGame, ShapleyResult};
use crate::data::{fit_preprocess, Channel, Dataset, PreparedSet, Split};
use crate::error::{Error, Result};
use crate::fusion::{Component, MultimodalModel, MultimodalSpec, Regime, RegimeSchedule, Stage, TrainConfig, TrainRun, R3_ORDER};
use crate::metrics::{evaluate_model, gini, HorizonReport};
use crate::nets::NetConfig;
use crate::HORIZONS;

/// How each profile model is built and trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    pub hidden: usize,
    pub nets: BTreeMap<Channel, NetConfig>,
    pub max_epochs: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

/// `max(gini(auc), 0)`, with NA scored as 0.
pub fn profile_score(auc: Option<f64>) -> f64 {
    auc.map_or(0.0, |a| gini(a).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOutcome {
    pub channels: Vec<Channel>,
    pub report: HorizonReport,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub game: ShapleyGame,
    pub result: ShapleyResult,
    /// One game per horizon, scored with that horizon's AUC.
    pub per_horizon: Vec<ShapleyResult>,
    pub profiles: Vec<ProfileOutcome>,
}

fn mask_of(channels: &[Channel], members: &[Channel]) -> u32 {
    channels.iter().enumerate().filter(|(_, c)| members.contains(c)).map(|(i, _)| 1u32 << i).sum()
}

/// Shared preparation: holdout split, preprocessing and an all-channel model spec.
struct Setup {
    spec: MultimodalSpec,
    train: PreparedSet,
    val: PreparedSet,
    test: PreparedSet,
}

impl Setup {
    fn new(ds: &Dataset, cfg: &ImportanceConfig, seed: u64) -> Result<Self> {
        let split = Split::holdout(ds, seed)?;
        let stats = fit_preprocess(ds, &split.train)?;
        Ok(Self {
            spec: MultimodalSpec::for_dataset(ds, cfg.hidden, &cfg.nets)?,
            train: PreparedSet::build(ds, &stats, &split.train)?,
            val: PreparedSet::build(ds, &stats, &split.val)?,
            test: PreparedSet::build(ds, &stats, &split.test)?,
        })
    }
}

/// Evaluate a copy of the model rounded as a saved checkpoint would be.
fn score_rounded(model: &MultimodalModel, data: &PreparedSet, active: &[Channel], chunk: usize) -> Result<HorizonReport> {
    let mut m = model.clone();
    m.params.round_f32();
    evaluate_model(&m, data, active, chunk)
}

/// Train the differential schedule for every non-empty channel profile.
///
/// Profiles whose ordered channel lists share a prefix share those stages:
/// each node of the prefix tree is trained once, branching from its parent.
fn train_profiles(setup: &Setup, cfg: &ImportanceConfig, seed: u64) -> Result<Vec<(Vec<Channel>, MultimodalModel)>> {
    let channels = setup.spec.channel_list();
    let order: Vec<Channel> = R3_ORDER.into_iter().filter(|c| channels.contains(c)).collect();
    let g = order.len();
    let full = RegimeSchedule::preset(Regime::R3, &order, cfg.max_epochs)?;
    full.validate(&channels)?;
    let root = TrainRun::new(MultimodalModel::init(setup.spec.clone(), seed)?, &setup.train, &setup.val, cfg.train.clone(), seed)?;

    let mut done: Vec<(Vec<Channel>, TrainRun<'_>)> = Vec::new();
    let mut frontier: Vec<(Vec<Channel>, TrainRun<'_>)> = vec![(Vec::new(), root)];
    let order = &order;
    while !frontier.is_empty() {
        let children: Vec<(Vec<Channel>, TrainRun<'_>)> = frontier
            .iter()
            .flat_map(|(prefix, run)| {
                let start = prefix.last().map_or(0, |c| order.iter().position(|x| x == c).expect("ordered") + 1);
                (start..g).map(move |k| {
                    let mut path = prefix.clone();
                    path.push(order[k]);
                    (path, run.clone())
                })
            })
            .collect();
        let trained = children
            .into_par_iter()
            .map(|(path, mut run)| {
                let depth = path.len() - 1;
                let stage = Stage {
                    active: path.clone(),
                    trainable: vec![Component::Channel(path[depth]), Component::Fusion],
                    patience: full.stages[depth].patience,
                    max_epochs: cfg.max_epochs,
                };
                run.run_stage(&stage).map_err(|e| Error::invalid(format!("profile {}: {e}", names(&path))))?;
                Ok((path, run))
            })
            .collect::<Result<Vec<_>>>()?;
        done.extend(frontier.into_iter().filter(|(p, _)| !p.is_empty()));
        frontier = trained;
    }
    Ok(done.into_iter().map(|(p, run)| (p, run.model)).collect())
}

fn names(channels: &[Channel]) -> String {
    channels.iter().map(|c| c.name()).collect::<Vec<_>>().join("+")
}

/// Grouped Shapley attribution over the dataset's channels, each profile
/// scored by the clipped Gini of its test AUC.
pub fn channel_importance(ds: &Dataset, cfg: &ImportanceConfig, seed: u64) -> Result<ChannelImportance> {
    let setup = Setup::new(ds, cfg, seed)?;
    let channels = setup.spec.channel_list();
    let group_names: Vec<String> = channels.iter().map(|c| c.name().to_string()).collect();
    let chunk = cfg.train.eval_chunk;
    let mut profiles = Vec::new();
    for (path, model) in train_profiles(&setup, cfg, seed)? {
        let report = score_rounded(&model, &setup.test, &path, chunk)?;
        let mut members = path.clone();
        members.sort();
        log::info!("profile {}: average AUC {:?}", names(&members), report.average);
        profiles.push(ProfileOutcome { score: profile_score(report.average), channels: members, report });
    }
    profiles.sort_by_key(|p| mask_of(&channels, &p.channels));

    let mut game = ShapleyGame::new(group_names.clone())?;
    let mut horizon_games: Vec<ShapleyGame> = (0..HORIZONS).map(|_| ShapleyGame::new(group_names.clone())).collect::<Result<_>>()?;
    for p in &profiles {
        let mask = mask_of(&channels, &p.channels);
        game.set(mask, p.score)?;
        for (h, hg) in horizon_games.iter_mut().enumerate() {
            hg.set(mask, profile_score(p.report.horizons[h].auc))?;
        }
    }
    Ok(ChannelImportance {
        result: shapley_values(&game)?,
        per_horizon: horizon_games.iter().map(shapley_values).collect::<Result<_>>()?,
        game,
        profiles,
    })
}

/// The two temporal groups of a channel window: recent steps and the rest.
pub fn temporal_groups(channel: Channel, window: usize) -> Result<[Range<usize>; 2]> {
    let recent = if channel.is_daily() { 252 } else { 4 };
    let minimum = if channel.is_daily() { 253 } else { 12 };
    if window < minimum {
        return Err(Error::invalid(format!("{channel} window {window} is too short for temporal groups (need at least {minimum})")));
    }
    Ok([window - recent..window, 0..window - recent])
}

/// Column names of the temporal table.
pub const TEMPORAL_GROUPS: [&str; 2] = ["Past year", "Previous 2 years"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRow {
    pub channel: Channel,
    pub game: ShapleyGame,
    pub result: ShapleyResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalImportance {
    pub rows: Vec<TemporalRow>,
}

impl TemporalImportance {
    /// Shapley values times 100, one row per channel.
    pub fn to_csv(&self) -> String {
        let mut out = format!("channel,{},{}\n", TEMPORAL_GROUPS[0], TEMPORAL_GROUPS[1]);
        for r in &self.rows {
            out.push_str(&format!("{},{:.2},{:.2}\n", r.channel, 100.0 * r.result.values[0], 100.0 * r.result.values[1]));
        }
        out
    }
}

/// Per channel: train that channel alone, then play a two-group game where
/// an absent group is ablated on the test set.
pub fn temporal_importance(ds: &Dataset, cfg: &ImportanceConfig, seed: u64) -> Result<TemporalImportance> {
    let setup = Setup::new(ds, cfg, seed)?;
    let channels = setup.spec.channel_list();
    for &c in &channels {
        temporal_groups(c, ds.windows.of(c))?;
    }
    let rows = channels
        .par_iter()
        .map(|&c| {
            let schedule = RegimeSchedule::preset(Regime::R3, &[c], cfg.max_epochs)?;
            let model = MultimodalModel::init(setup.spec.clone(), seed)?;
            let run = TrainRun::new(model, &setup.train, &setup.val, cfg.train.clone(), seed)?.run(&schedule)?;
            let groups = temporal_groups(c, ds.windows.of(c))?;
            let mut scores = [0.0; 4];
            for (mask, slot) in scores.iter_mut().enumerate().skip(1) {
                let mut data = setup.test.clone();
                let m = data.channels.get_mut(&c).expect("channel present");
                for (g, range) in groups.iter().enumerate() {
                    if mask >> g & 1 == 0 {
                        m.ablate_steps(range.clone());
                    }
                }
                *slot = profile_score(score_rounded(&run.model, &data, &[c], cfg.train.eval_chunk)?.average);
            }
            let game = ShapleyGame::from_fn(TEMPORAL_GROUPS.iter().map(|s| s.to_string()).collect(), |m| scores[m as usize])?;
            Ok(TemporalRow { channel: c, result: shapley_values(&game)?, game })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TemporalImportance { rows })
}
