use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tep_core::data::{
    fit_preprocess, generate_synthetic, load_channels, write_channels, Channel, ChannelPaths, Dataset, RawData, Split, Windows,
};
use tep_core::fusion::{fit, Checkpoint, MultimodalSpec, RegimeSchedule};
use tep_core::interpret::{export_heatmap, extract_attention};
use tep_core::metrics::{cross_validate, evaluate, window_sweep, HorizonReport, SweepSettings};
use tep_core::shapley::{channel_importance, temporal_groups, temporal_importance, ImportanceConfig};
use tep_core::{HORIZONS, HORIZON_LABELS};

use crate::config::{ConfigError, ExperimentConfig};

pub const SNAPSHOT: &str = "config.resolved.toml";

#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    Stage { stage: &'static str, source: tep_core::Error },
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Stage { .. } => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => e.fmt(f),
            Failure::Stage { stage, source } => write!(f, "stage `{stage}` failed: {source}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Outcome<T>;
}

impl<T, E: Into<tep_core::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Outcome<T> {
        self.map_err(|e| Failure::Stage { stage, source: e.into() })
    }
}

fn invalid(stage: &'static str, msg: impl Into<String>) -> Failure {
    Failure::Stage { stage, source: tep_core::Error::Invalid(msg.into()) }
}

/// Output directory of one command run, with helpers that write artifacts.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn create(cfg: &ExperimentConfig, command: &str) -> Outcome<Self> {
        let dir = cfg.output_dir.join(command);
        std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        let out = Self { dir };
        out.text(SNAPSHOT, &cfg.to_toml())?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&self, name: &str, body: &str) -> Outcome {
        let path = self.path(name);
        std::fs::write(&path, body).map_err(|e| io_failure(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Outcome {
        let mut body = serde_json::to_string_pretty(value).stage("write-artifacts")?;
        body.push('\n');
        self.text(name, &body)
    }
}

fn io_failure(path: &Path, source: std::io::Error) -> Failure {
    Failure::Stage { stage: "write-artifacts", source: tep_core::Error::Io { path: path.to_path_buf(), source } }
}

fn load_raw(cfg: &ExperimentConfig) -> Outcome<RawData> {
    match &cfg.data.dir {
        Some(dir) => load_channels(&ChannelPaths::in_dir(dir)).stage("load-data"),
        None => Ok(generate_synthetic(&cfg.data.generator, cfg.seed).stage("generate")?.raw),
    }
}

/// Assemble observations and keep only the channels accepted by `keep`.
fn assemble(raw: &RawData, windows: Windows, keep: impl Fn(Channel) -> bool) -> Outcome<Dataset> {
    let mut ds = Dataset::assemble(raw, windows).stage("assemble")?;
    for c in ds.channels.clone() {
        if !keep(c) {
            ds = ds.without_channel(c);
        }
    }
    if ds.channels.is_empty() {
        return Err(invalid("assemble", "no enabled channel is present in the data"));
    }
    if ds.is_empty() {
        return Err(invalid("assemble", "no observations have enough history for the configured windows"));
    }
    let s = ds.summary();
    log::info!(
        "dataset: {} firms ({} defaulted), {} observations, channels {}",
        s.firms,
        s.defaulted_firms,
        s.observations,
        ds.channels.iter().map(|c| c.name()).collect::<Vec<_>>().join("+")
    );
    Ok(ds)
}

fn configured_dataset(cfg: &ExperimentConfig) -> Outcome<Dataset> {
    let raw = load_raw(cfg)?;
    assemble(&raw, cfg.windows, |c| cfg.channels.enabled(c))
}

/// Rebuild the dataset a checkpoint was trained on.
fn checkpoint_dataset(cfg: &ExperimentConfig, ck: &Checkpoint) -> Outcome<Dataset> {
    let raw = load_raw(cfg)?;
    let wanted = ck.meta.spec.channel_list();
    let ds = assemble(&raw, ck.meta.windows, |c| wanted.contains(&c))?;
    if let Some(c) = wanted.iter().find(|c| !ds.has_channel(**c)) {
        return Err(invalid("assemble", format!("the checkpoint needs the {c} channel, which the data lacks")));
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    Checkpoint::load(path).stage("load-checkpoint")
}

fn holdout(ds: &Dataset, seed: u64) -> Outcome<Split> {
    let split = Split::holdout(ds, seed).stage("split")?;
    log::info!("holdout split: {} train, {} validation, {} test observations", split.train.len(), split.val.len(), split.test.len());
    Ok(split)
}

fn run_label(cfg: &ExperimentConfig) -> String {
    match &cfg.training.stages {
        Some(_) => "custom".to_string(),
        None => format!("{:?}", cfg.training.regime).to_lowercase(),
    }
}

pub fn gen(cfg: &ExperimentConfig) -> Outcome {
    let out = Artifacts::create(cfg, "gen")?;
    let g = generate_synthetic(&cfg.data.generator, cfg.seed).stage("generate")?;
    write_channels(&g.raw, &out.dir).stage("write-artifacts")?;
    log::info!("generated {} firms, {} quarterly rows, {} price rows", g.raw.labels.len(), g.raw.fundamental.len(), g.raw.pricing.len());
    Ok(())
}

#[derive(Serialize)]
struct SplitAudit {
    observations: usize,
    positives: [usize; HORIZONS],
}

#[derive(Serialize)]
struct Audit {
    summary: tep_core::data::DatasetSummary,
    channels: Vec<Channel>,
    features: std::collections::BTreeMap<Channel, usize>,
    windows: Windows,
    train: SplitAudit,
    validation: SplitAudit,
    test: SplitAudit,
    lookahead_check: &'static str,
}

fn split_audit(ds: &Dataset, idx: &[usize]) -> SplitAudit {
    let mut positives = [0; HORIZONS];
    for t in ds.targets(idx) {
        for (p, y) in positives.iter_mut().zip(t) {
            *p += usize::from(y > 0.5);
        }
    }
    SplitAudit { observations: idx.len(), positives }
}

pub fn prep(cfg: &ExperimentConfig) -> Outcome {
    let out = Artifacts::create(cfg, "prep")?;
    let ds = configured_dataset(cfg)?;
    ds.audit_no_lookahead().stage("audit")?;
    let split = holdout(&ds, cfg.seed)?;
    let stats = fit_preprocess(&ds, &split.train).stage("preprocess")?;
    out.json("stats.json", &stats)?;
    let train = split_audit(&ds, &split.train);
    for (h, label) in HORIZON_LABELS.iter().enumerate() {
        if train.positives[h] == 0 {
            log::warn!("no training positives at {label}");
        }
    }
    out.json(
        "audit.json",
        &Audit {
            summary: ds.summary(),
            channels: ds.channels.clone(),
            features: ds.features.clone(),
            windows: ds.windows,
            train,
            validation: split_audit(&ds, &split.val),
            test: split_audit(&ds, &split.test),
            lookahead_check: "passed",
        },
    )
}

fn model_and_schedule(cfg: &ExperimentConfig, ds: &Dataset) -> Outcome<(MultimodalSpec, RegimeSchedule)> {
    let spec = MultimodalSpec::for_dataset(ds, cfg.model.hidden, &cfg.model.nets()).stage("build-model")?;
    let schedule = cfg.training.schedule(&ds.channels).stage("build-model")?;
    schedule.validate(&ds.channels).stage("build-model")?;
    Ok((spec, schedule))
}

fn report_files(out: &Artifacts, stem: &str, name: &str, report: &HorizonReport) -> Outcome {
    out.text(&format!("{stem}.csv"), &HorizonReport::to_csv(&[(name.to_string(), report.clone())]))?;
    out.json(&format!("{stem}.json"), report)
}

pub fn train(cfg: &ExperimentConfig) -> Outcome {
    let out = Artifacts::create(cfg, "train")?;
    let ds = configured_dataset(cfg)?;
    let (spec, schedule) = model_and_schedule(cfg, &ds)?;
    let split = holdout(&ds, cfg.seed)?;
    let ck = fit(&ds, &split, spec, &schedule, &cfg.training.train(), cfg.seed).stage("train")?;
    for s in &ck.meta.log.stages {
        log::info!(
            "stage {} active {:?}: frozen hash {} -> {}, trainable hash {} -> {}",
            s.stage,
            s.active.iter().map(|c| c.name()).collect::<Vec<_>>(),
            s.frozen_hash_before,
            s.frozen_hash_after,
            s.trainable_hash_before,
            s.trainable_hash_after
        );
        if s.frozen_hash_before != s.frozen_hash_after {
            return Err(invalid("train", format!("stage {} changed frozen parameters", s.stage)));
        }
    }
    ck.save(&out.path("model.tepc")).stage("write-artifacts")?;
    log::info!("wrote {}", out.path("model.tepc").display());
    out.json("training_log.json", &ck.meta.log)?;
    let report = evaluate(&ck, &ds, &split.test).stage("evaluate")?;
    log::info!("test average AUC {:?}", report.average);
    report_files(&out, "metrics", &run_label(cfg), &report)
}

fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("train").join("model.tepc")
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Outcome {
    let path = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
    let out = Artifacts::create(cfg, "eval")?;
    let ck = load_checkpoint(&path)?;
    let ds = checkpoint_dataset(cfg, &ck)?;
    let split = holdout(&ds, ck.meta.seed)?;
    let preds = ck.predict(&ds, &split.test, cfg.eval.isotonic).stage("evaluate")?;
    let scores: Vec<[f64; HORIZONS]> = preds.iter().map(|p| p.probabilities).collect();
    let report = HorizonReport::from_scores(&scores, &ds.targets(&split.test)).stage("evaluate")?;
    log::info!("test average AUC {:?}", report.average);
    let mut csv = format!("firm_id,date,{}\n", HORIZON_LABELS.map(|l| format!("p_{}", &l[2..])).join(","));
    for p in &preds {
        let _ = writeln!(csv, "{},{},{}", p.firm_id, p.date, p.probabilities.map(|v| v.to_string()).join(","));
    }
    out.text("predictions.csv", &csv)?;
    report_files(&out, "report", "checkpoint", &report)
}

pub fn cv(cfg: &ExperimentConfig) -> Outcome {
    let out = Artifacts::create(cfg, "cv")?;
    let ds = configured_dataset(cfg)?;
    let (spec, schedule) = model_and_schedule(cfg, &ds)?;
    let report = cross_validate(&ds, cfg.cv.k, &spec, &schedule, &cfg.training.train(), cfg.seed).stage("cross-validate")?;
    out.text("cv_report.csv", &report.to_csv(&run_label(cfg)))?;
    out.text("cv_folds.csv", &report.folds_csv())?;
    out.json("cv.json", &report)
}

pub fn sweep_window(cfg: &ExperimentConfig) -> Outcome {
    let out = Artifacts::create(cfg, "sweep-window")?;
    let ds = configured_dataset(cfg)?;
    let settings = SweepSettings {
        net: cfg.model.pricing.clone(),
        hidden: cfg.model.hidden,
        max_epochs: cfg.training.max_epochs,
        train: cfg.training.train(),
    };
    let report = window_sweep(&ds, &settings, &cfg.sweep.windows, cfg.seed).stage("window-sweep")?;
    out.text("sweep.csv", &report.to_csv())?;
    out.json("sweep.json", &report)
}

fn importance_config(cfg: &ExperimentConfig) -> ImportanceConfig {
    ImportanceConfig {
        hidden: cfg.model.hidden,
        nets: cfg.model.nets(),
        max_epochs: cfg.training.max_epochs,
        train: cfg.training.train(),
    }
}

pub fn shapley(cfg: &ExperimentConfig) -> Outcome {
    let out = Artifacts::create(cfg, "shapley")?;
    let ds = configured_dataset(cfg)?;
    let icfg = importance_config(cfg);
    let imp = channel_importance(&ds, &icfg, cfg.seed).stage("shapley")?;
    for (g, v) in imp.result.groups.iter().zip(&imp.result.values) {
        log::info!("{g}: shapley value {v:.5}");
    }
    out.text("shapley.csv", &imp.to_csv())?;
    out.text("shapley_per_horizon.csv", &imp.per_horizon_csv())?;
    out.text("profiles.csv", &imp.profiles_csv())?;
    out.text("shapley.svg", &imp.bar_chart_svg())?;
    out.json("shapley.json", &imp)?;
    if !cfg.shapley.temporal {
        return Ok(());
    }
    let mut eligible = ds.clone();
    for c in ds.channels.iter().copied() {
        if let Err(e) = temporal_groups(c, ds.windows.of(c)) {
            log::warn!("temporal attribution skips the {c} channel: {e}");
            eligible = eligible.without_channel(c);
        }
    }
    if eligible.channels.is_empty() {
        return Err(invalid("temporal-shapley", "no channel window is long enough for temporal groups"));
    }
    let temporal = temporal_importance(&eligible, &icfg, cfg.seed).stage("temporal-shapley")?;
    out.text("temporal.csv", &temporal.to_csv())?;
    out.json("temporal.json", &temporal)
}

pub fn attention(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Outcome {
    let path = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
    let out = Artifacts::create(cfg, "attention")?;
    let ck = load_checkpoint(&path)?;
    let ds = checkpoint_dataset(cfg, &ck)?;
    let split = holdout(&ds, ck.meta.seed)?;
    let set = extract_attention(&ck, &ds, &split.test, cfg.attention.channel, cfg.attention.horizon).stage("attention")?;
    export_heatmap(&set, &out.dir).stage("write-artifacts")?;
    out.json("attention.json", &set)
}
