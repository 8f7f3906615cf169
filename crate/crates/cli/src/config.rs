//! Experiment configuration: one TOML file, every key optional.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tep_core::data::{Channel, GenConfig, Windows};
use tep_core::fusion::{Regime, RegimeSchedule, Stage, TrainConfig};
use tep_core::nets::{LstmConfig, NetConfig, NnConfig, TcnConfig, TepConfig};
use tep_core::tensor::Optimizer;
use tep_core::HORIZONS;

/// A rejected configuration, located by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub msg: String,
}

impl ConfigError {
    fn at(path: impl Into<String>, msg: impl fmt::Display) -> Self {
        Self { path: path.into(), msg: msg.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "config: {}", self.msg)
        } else {
            write!(f, "config key `{}`: {}", self.path, self.msg)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output root; each command writes into `<output_dir>/<command>`.
    /// Left out of the resolved snapshot since it never affects results.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub windows: Windows,
    pub channels: ChannelToggles,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub cv: CvConfig,
    pub sweep: SweepConfig,
    pub shapley: ShapleyConfig,
    pub attention: AttentionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("tep-out"),
            data: DataConfig::default(),
            windows: Windows { quarters: 12, pricing_days: 126 },
            channels: ChannelToggles::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            cv: CvConfig::default(),
            sweep: SweepConfig::default(),
            shapley: ShapleyConfig::default(),
            attention: AttentionConfig::default(),
        }
    }
}

/// CSV input directory, or generator settings when `dir` is unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub generator: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelToggles {
    pub fundamental: bool,
    pub market: bool,
    pub pricing: bool,
    pub auxiliary: bool,
}

impl Default for ChannelToggles {
    fn default() -> Self {
        Self { fundamental: true, market: true, pricing: true, auxiliary: true }
    }
}

impl ChannelToggles {
    pub fn enabled(&self, c: Channel) -> bool {
        match c {
            Channel::Fundamental => self.fundamental,
            Channel::Market => self.market,
            Channel::Pricing => self.pricing,
            Channel::Auxiliary => self.auxiliary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the fusion dense layer.
    pub hidden: usize,
    pub fundamental: NetConfig,
    pub market: NetConfig,
    pub pricing: NetConfig,
    pub auxiliary: NetConfig,
}

fn small_tep(model_size: usize) -> NetConfig {
    NetConfig::Tep(TepConfig { model_size, layers: 1, heads: 4, ..TepConfig::default() })
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            fundamental: NetConfig::Tep(TepConfig::default()),
            market: NetConfig::Tep(TepConfig::default()),
            pricing: small_tep(24),
            auxiliary: small_tep(24),
        }
    }
}

impl ModelConfig {
    pub fn net(&self, c: Channel) -> &NetConfig {
        match c {
            Channel::Fundamental => &self.fundamental,
            Channel::Market => &self.market,
            Channel::Pricing => &self.pricing,
            Channel::Auxiliary => &self.auxiliary,
        }
    }

    pub fn nets(&self) -> BTreeMap<Channel, NetConfig> {
        Channel::ALL.into_iter().map(|c| (c, self.net(c).clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub regime: Regime,
    /// Explicit stages; when set they replace the `regime` preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<Stage>>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub eval_chunk: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { regime: Regime::R3, stages: None, max_epochs: 50, batch_size: t.batch_size, eval_chunk: t.eval_chunk, optimizer: t.optimizer }
    }
}

impl TrainingConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig { batch_size: self.batch_size, optimizer: self.optimizer, eval_chunk: self.eval_chunk }
    }

    pub fn schedule(&self, channels: &[Channel]) -> tep_core::Result<RegimeSchedule> {
        match &self.stages {
            Some(stages) => Ok(RegimeSchedule { stages: stages.clone() }),
            None => RegimeSchedule::preset(self.regime, channels, self.max_epochs),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Project each probability vector onto non-decreasing sequences.
    pub isotonic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Pricing lookbacks in trading days.
    pub windows: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { windows: vec![63, 126, 252] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapleyConfig {
    /// Also attribute each channel's score to its recent and older steps.
    pub temporal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub channel: Channel,
    /// Horizon index (0 = 3 months, 5 = 3 years) that splits defaulted from non-defaulted firms.
    pub horizon: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { channel: Channel::Fundamental, horizon: tep_core::interpret::DEFAULT_GROUP_HORIZON }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::at("", e.message()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::at(if path == "." { String::new() } else { path }, e.inner().message())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::at("", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The snapshot written next to every command's outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn enabled_channels(&self) -> Vec<Channel> {
        Channel::ALL.into_iter().filter(|c| self.channels.enabled(*c)).collect()
    }

    /// Range and consistency checks, reported at the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.generator.validate().map_err(|e| ConfigError::at("data.generator", e))?;
        if self.windows.quarters == 0 {
            return Err(ConfigError::at("windows.quarters", "must be positive"));
        }
        if self.windows.pricing_days == 0 {
            return Err(ConfigError::at("windows.pricing_days", "must be positive"));
        }
        if self.enabled_channels().is_empty() {
            return Err(ConfigError::at("channels", "at least one channel must be enabled"));
        }
        if self.model.hidden == 0 {
            return Err(ConfigError::at("model.hidden", "must be positive"));
        }
        for c in Channel::ALL {
            self.model.net(c).validate().map_err(|e| ConfigError::at(format!("model.{c}"), e))?;
        }
        let t = &self.training;
        for (key, v) in [("max_epochs", t.max_epochs), ("batch_size", t.batch_size), ("eval_chunk", t.eval_chunk)] {
            if v == 0 {
                return Err(ConfigError::at(format!("training.{key}"), "must be positive"));
            }
        }
        t.optimizer.validate().map_err(|e| ConfigError::at("training.optimizer", e))?;
        if let Some(stages) = &t.stages {
            RegimeSchedule { stages: stages.clone() }.validate(&Channel::ALL).map_err(|e| ConfigError::at("training.stages", e))?;
        }
        if self.cv.k < 2 {
            return Err(ConfigError::at("cv.k", format!("must be at least 2, got {}", self.cv.k)));
        }
        if self.sweep.windows.is_empty() || self.sweep.windows.contains(&0) {
            return Err(ConfigError::at("sweep.windows", "needs at least one positive window"));
        }
        if self.attention.horizon >= HORIZONS {
            return Err(ConfigError::at("attention.horizon", format!("must be below {HORIZONS}")));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every config key with its default, as `(dotted key, rendered default)`.
/// Keys without a default are shown as `unset`; per-channel model keys are
/// listed for every model kind.
pub fn reference_keys() -> Vec<(String, String)> {
    let defaults = ExperimentConfig::default();
    let value = toml::Value::try_from(&defaults).expect("config serializes");
    let mut keys = Vec::new();
    flatten("", &value, &mut keys);
    keys.retain(|(k, _)| !k.starts_with("model.") || k == "model.hidden");
    keys.push(("output_dir".into(), format!("\"{}\"", defaults.output_dir.display())));
    keys.push(("data.dir".into(), "unset".into()));
    keys.push(("data.generator.planted.lag".into(), "unset".into()));
    keys.push(("data.generator.planted.fraction".into(), "unset".into()));
    keys.push(("data.generator.planted.shock".into(), "4.0".into()));
    keys.push(("training.stages".into(), "unset".into()));
    for c in Channel::ALL {
        let current = defaults.model.net(c);
        keys.push((format!("model.{c}.kind"), format!("\"{}\"", current.kind())));
        let kinds = [
            NetConfig::Tep(TepConfig::default()),
            NetConfig::Tcn(TcnConfig::default()),
            NetConfig::Lstm(LstmConfig::default()),
            NetConfig::Nn(NnConfig::default()),
        ];
        for net in kinds {
            let shown = if net.kind() == current.kind() { current.clone() } else { net };
            let mut fields = Vec::new();
            flatten("", &toml::Value::try_from(&shown).expect("net serializes"), &mut fields);
            let has_ff = fields.iter().any(|(k, _)| k == "ff_size");
            for (k, v) in fields.into_iter().filter(|(k, _)| k != "kind") {
                keys.push((format!("model.{c}.{k} ({})", shown.kind()), v));
            }
            if shown.kind() == "tep" && !has_ff {
                keys.push((format!("model.{c}.ff_size (tep)"), "4 * model_size".into()));
            }
        }
    }
    keys.sort();
    keys
}
