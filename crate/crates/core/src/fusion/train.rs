use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::RngState;
use super::model::{Component, MultimodalModel};
use crate::data::{Channel, PreparedSet};
use crate::error::{Error, Result};
use crate::rng::named_rng;
use crate::tensor::{Optimizer, OptimizerState};

/// Patience-based stopping on a validation loss sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// New best; the caller should snapshot weights.
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: None, since_best: 0, epoch: 0 }
    }

    /// Feed one epoch's validation loss. Only strict improvement resets the counter.
    pub fn update(&mut self, val_loss: f64) -> StopDecision {
        let epoch = self.epoch;
        self.epoch += 1;
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub active: Vec<Channel>,
    pub trainable: Vec<Component>,
    pub patience: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Each channel trained alone with the fusion head, one stage per channel.
    R1,
    /// All channels trained jointly.
    R2,
    /// Differential: grow the channel set one at a time, freezing earlier channels.
    R3,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r1" => Ok(Regime::R1),
            "r2" => Ok(Regime::R2),
            "r3" => Ok(Regime::R3),
            _ => Err(Error::invalid(format!("unknown regime `{s}` (expected r1, r2 or r3)"))),
        }
    }
}

/// Order in which the differential regime adds channels.
pub const R3_ORDER: [Channel; 4] = [Channel::Pricing, Channel::Auxiliary, Channel::Market, Channel::Fundamental];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSchedule {
    pub stages: Vec<Stage>,
}

impl RegimeSchedule {
    pub fn preset(regime: Regime, channels: &[Channel], max_epochs: usize) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("schedule needs at least one channel"));
        }
        let mut ordered: Vec<Channel> = Channel::ALL.into_iter().filter(|c| channels.contains(c)).collect();
        let stages = match regime {
            Regime::R1 => ordered
                .iter()
                .map(|&c| Stage { active: vec![c], trainable: vec![Component::Channel(c), Component::Fusion], patience: 5, max_epochs })
                .collect(),
            Regime::R2 => {
                let mut trainable: Vec<Component> = ordered.iter().map(|&c| Component::Channel(c)).collect();
                trainable.push(Component::Fusion);
                vec![Stage { active: ordered, trainable, patience: 5, max_epochs }]
            }
            Regime::R3 => {
                ordered = R3_ORDER.into_iter().filter(|c| channels.contains(c)).collect();
                (0..ordered.len())
                    .map(|k| Stage {
                        active: ordered[..=k].to_vec(),
                        trainable: vec![Component::Channel(ordered[k]), Component::Fusion],
                        patience: if k == 0 { 8 } else { 5 },
                        max_epochs,
                    })
                    .collect()
            }
        };
        Ok(Self { stages })
    }

    pub fn validate(&self, model_channels: &[Channel]) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("schedule has no stages"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.trainable.is_empty() {
                return Err(Error::invalid(format!("stage {i}: empty trainable set")));
            }
            if s.active.is_empty() || s.patience == 0 || s.max_epochs == 0 {
                return Err(Error::invalid(format!("stage {i}: needs active channels, patience > 0 and max_epochs > 0")));
            }
            for c in &s.active {
                if !model_channels.contains(c) {
                    return Err(Error::invalid(format!("stage {i}: channel {c} not in the model")));
                }
            }
            for t in &s.trainable {
                if let Component::Channel(c) = t {
                    if !s.active.contains(c) {
                        return Err(Error::invalid(format!("stage {i}: trainable channel {c} is not active")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Channels used at prediction time: the union of every stage's active set.
    pub fn final_active(&self) -> Vec<Channel> {
        let mut out: Vec<Channel> = self.stages.iter().flat_map(|s| s.active.iter().copied()).collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, optimizer: Optimizer::adam(1e-3), eval_chunk: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub active: Vec<Channel>,
    pub trainable: Vec<Component>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub trainable_hash_before: String,
    pub trainable_hash_after: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub stages: Vec<StageLog>,
}

fn trainable_pred(comps: &[Component]) -> impl Fn(&str) -> bool + '_ {
    move |name: &str| comps.iter().any(|c| c.owns(name))
}

/// A training run in progress. Cloning it branches the run.
#[derive(Debug, Clone)]
pub struct TrainRun<'a> {
    pub model: MultimodalModel,
    pub log: TrainingLog,
    pub config: TrainConfig,
    pub seed: u64,
    pub rng: Vec<RngState>,
    train: &'a PreparedSet,
    val: &'a PreparedSet,
}

impl<'a> TrainRun<'a> {
    pub fn new(model: MultimodalModel, train: &'a PreparedSet, val: &'a PreparedSet, config: TrainConfig, seed: u64) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("training and validation sets must be non-empty"));
        }
        if config.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        config.optimizer.validate()?;
        Ok(Self { model, log: TrainingLog::default(), config, seed, rng: Vec::new(), train, val })
    }

    fn mean_loss(&self, data: &PreparedSet, active: &[Channel]) -> Result<f64> {
        let none = |_: &str| false;
        let rows: Vec<usize> = (0..data.len()).collect();
        let mut total = 0.0;
        for part in rows.chunks(self.config.eval_chunk.max(1)) {
            let (tape, loss) = self.model.batch_loss(data, part, active, &none, None)?;
            total += tape.value(loss).data()[0] * part.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// Run the next stage of a schedule: mini-batch Adam/SGD on the stage's
    /// trainable set, validation after each epoch, best weights restored.
    pub fn run_stage(&mut self, stage: &Stage) -> Result<&StageLog> {
        let index = self.log.stages.len();
        let trainable = trainable_pred(&stage.trainable);
        let has_trainable = self.model.params.names().any(|n| trainable(n));
        if !has_trainable {
            return Err(Error::invalid(format!("stage {index}: trainable set matches no parameters")));
        }
        let frozen_hash_before = self.model.params.digest(|n| !trainable(n));
        let trainable_hash_before = self.model.params.digest(&trainable);

        let mut opt = OptimizerState::new(self.config.optimizer)?;
        let mut shuffle = named_rng(self.seed, &format!("train/stage{index}/shuffle"));
        let mut dropout = named_rng(self.seed, &format!("train/stage{index}/dropout"));
        let mut stopper = EarlyStopping::new(stage.patience);
        let mut best = self.model.params.subset(&trainable);
        let mut epochs = Vec::new();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut stopped_early = false;
        let diverged = |epoch: usize, e: Error| match e {
            Error::NonFinite { op } => Error::Diverged { stage: index, epoch, detail: format!("non-finite value in {op}") },
            other => other,
        };

        for epoch in 0..stage.max_epochs {
            order.shuffle(&mut shuffle);
            let mut sum = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                let (tape, loss) = self
                    .model
                    .batch_loss(self.train, batch, &stage.active, &trainable, Some(&mut dropout))
                    .map_err(|e| diverged(epoch, e))?;
                let lv = tape.value(loss).data()[0];
                let grads = tape.backward(loss).map_err(|e| diverged(epoch, e))?;
                opt.step(&mut self.model.params, grads.params())?;
                sum += lv * batch.len() as f64;
            }
            let train_loss = sum / self.train.len() as f64;
            let val_loss = self.mean_loss(self.val, &stage.active).map_err(|e| diverged(epoch, e))?;
            if !train_loss.is_finite() || !val_loss.is_finite() {
                return Err(Error::Diverged { stage: index, epoch, detail: format!("loss train={train_loss} val={val_loss}") });
            }
            log::debug!("stage {index} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
            epochs.push(EpochLog { epoch, train_loss, val_loss });
            match stopper.update(val_loss) {
                StopDecision::Improved => best = self.model.params.subset(&trainable),
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
        self.model.params.overwrite_from(&best)?;
        for (name, r) in [("shuffle", &shuffle), ("dropout", &dropout)] {
            self.rng.push(RngState {
                name: format!("train/stage{index}/{name}"),
                seed: self.seed,
                stream: r.get_stream(),
                word_pos: r.get_word_pos(),
            });
        }
        let log = StageLog {
            stage: index,
            active: stage.active.clone(),
            trainable: stage.trainable.clone(),
            epochs,
            best_epoch: stopper.best_epoch.unwrap_or(0),
            best_val_loss: stopper.best.unwrap_or(f64::NAN),
            stopped_early,
            frozen_hash_before,
            frozen_hash_after: self.model.params.digest(|n| !trainable(n)),
            trainable_hash_before,
            trainable_hash_after: self.model.params.digest(&trainable),
        };
        log::info!(
            "stage {index} ({}) finished: {} epochs, best val loss {:.5} at epoch {}",
            stage.active.iter().map(|c| c.name()).collect::<Vec<_>>().join("+"),
            log.epochs.len(),
            log.best_val_loss,
            log.best_epoch
        );
        self.log.stages.push(log);
        Ok(self.log.stages.last().expect("just pushed"))
    }

    pub fn run(mut self, schedule: &RegimeSchedule) -> Result<Self> {
        schedule.validate(&self.model.spec.channel_list())?;
        for stage in &schedule.stages {
            self.run_stage(stage)?;
        }
        Ok(self)
    }
}
