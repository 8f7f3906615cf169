//! Multimodal fusion model, staged training regimes and checkpoints.

mod checkpoint;
mod loss;
mod model;
mod train;


use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, MAGIC, VERSION};
pub use loss::{bce_term, multilabel_loss, multilabel_loss_grad, sigmoid};
pub use model::{channel_prefix, ChannelSpec, Component, FusedOutput, MultimodalModel, MultimodalSpec, FUSION};
pub use train::{
    EarlyStopping, EpochLog, Regime, RegimeSchedule, Stage, StageLog, StopDecision, TrainConfig, TrainRun, TrainingLog, R3_ORDER,
};

use crate::data::{fit_preprocess, Dataset, PreparedSet, Split};
use crate::error::{Error, Result};
use crate::HORIZONS;

/// Fit preprocessing on the training split, initialize the model and run
/// every stage of the schedule. Parameters are rounded to `f32` at the end.
pub fn fit(ds: &Dataset, split: &Split, spec: MultimodalSpec, schedule: &RegimeSchedule, config: &TrainConfig, seed: u64) -> Result<Checkpoint> {
    let stats = fit_preprocess(ds, &split.train)?;
    let train = PreparedSet::build(ds, &stats, &split.train)?;
    let val = PreparedSet::build(ds, &stats, &split.val)?;
    let model = MultimodalModel::init(spec, seed)?;
    let run = TrainRun::new(model, &train, &val, config.clone(), seed)?.run(schedule)?;
    let TrainRun { mut model, log, rng, .. } = run;
    model.params.round_f32();
    Ok(Checkpoint {
        params: model.params,
        meta: CheckpointMeta {
            spec: model.spec,
            stats,
            windows: ds.windows,
            schedule: schedule.clone(),
            train: config.clone(),
            active: schedule.final_active(),
            seed,
            log,
            rng,
        },
    })
}

/// Scored observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub firm_id: String,
    pub date: NaiveDate,
    pub probabilities: [f64; HORIZONS],
}

/// Pool-adjacent-violators fit of a non-decreasing sequence (unit weights).
pub fn isotonic_non_decreasing(p: &[f64; HORIZONS]) -> [f64; HORIZONS] {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(HORIZONS);
    for &v in p {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let n = na + nb;
            *blocks.last_mut().expect("two blocks") = ((a * na as f64 + b * nb as f64) / n as f64, n);
        }
    }
    let mut out = [0.0; HORIZONS];
    let mut i = 0;
    for (v, n) in blocks {
        out[i..i + n].fill(v);
        i += n;
    }
    out
}

impl Checkpoint {
    /// Horizon probabilities for the given observations of `ds`. The dataset
    /// must use the checkpoint's windows and feature counts.
    pub fn predict(&self, ds: &Dataset, idx: &[usize], isotonic: bool) -> Result<Vec<Prediction>> {
        if ds.windows != self.meta.windows {
            return Err(Error::invalid(format!("dataset windows {:?} differ from the checkpoint's {:?}", ds.windows, self.meta.windows)));
        }
        let data = PreparedSet::build(ds, &self.meta.stats, idx)?;
        let logits = self.model().logits(&data, &self.meta.active, self.meta.train.eval_chunk)?;
        Ok(idx
            .iter()
            .zip(logits)
            .map(|(&i, z)| {
                let o = &ds.observations[i];
                let mut p = z.map(sigmoid);
                if isotonic {
                    p = isotonic_non_decreasing(&p);
                }
                Prediction { firm_id: ds.firms[o.firm].id.clone(), date: o.date, probabilities: p }
            })
            .collect())
    }
}
