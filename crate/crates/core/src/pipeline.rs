//! Pipeline configuration and the in-memory end-to-end run.
//!
//! One JSON document configures every stage. Every field has a default and
//! unknown keys are rejected. The decoupling toggle is `train.flags.decoupling`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contrastive::{pretrain, PretrainConfig, PretrainRecord};
use crate::data::{SynthConfig, TrafficDataset};
use crate::decouple::{fit_periodic_split, PeriodicModel};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::harness::{evaluate, train, EvalConfig, EvalReport, Forecaster, TrainConfig, TrainRecord};
use crate::prep::fit_scalers;
use crate::split::{make_split, AccessRecord, Protocol, SplitManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `signals.csv` and `adjacency.csv`.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("data") }
    }
}

impl DataConfig {
    pub fn signals(&self) -> PathBuf {
        self.dir.join("signals.csv")
    }

    pub fn adjacency(&self) -> PathBuf {
        self.dir.join("adjacency.csv")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    /// Train, validation and test shares of the roads.
    pub spatial: [f64; 3],
    /// Past, validation and test shares of the timeline.
    pub temporal: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, spatial: [0.7, 0.1, 0.2], temporal: [0.7, 0.1, 0.2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeriodicConfig {
    /// Extension period of `s(k)` in steps (one week of 5-minute steps).
    pub week_period: usize,
}

impl Default for PeriodicConfig {
    fn default() -> Self {
        Self { week_period: 2016 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub periodic: PeriodicConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Where artifacts go.
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            periodic: PeriodicConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output: PathBuf::from("runs"),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.periodic.week_period == 0 {
            return Err(Error::Config("week_period must be positive".into()));
        }
        if self.train.flags.sga && self.pretrain.dim != self.train.backbone.hidden {
            return Err(Error::Config(format!(
                "SGA needs pretrain.dim ({}) equal to train.backbone.hidden ({})",
                self.pretrain.dim, self.train.backbone.hidden
            )));
        }
        Ok(())
    }

    /// This config with the grid-cell seeds applied; the encoder shares the model seed.
    pub fn with_seeds(&self, model_seed: u64, split_seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.train.model_seed = model_seed;
        cfg.pretrain.seed = model_seed;
        cfg.split.seed = split_seed;
        cfg
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub periodic_seconds: f64,
    pub pretrain_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Everything one pipeline run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub manifest: SplitManifest,
    pub periodic: Option<PeriodicModel>,
    pub encoder: Option<Encoder>,
    pub pretrain_log: Vec<PretrainRecord>,
    pub model: Forecaster,
    pub train_log: Vec<TrainRecord>,
    pub report: EvalReport,
    /// Every read the run made through the protocol guard.
    pub reads: Vec<AccessRecord>,
    pub timings: StageTimings,
}

/// split → fit-periodic → pretrain → train → eval, skipping stages the flags do not need.
pub fn run_pipeline(ds: &TrafficDataset, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let flags = cfg.train.flags;
    let manifest = make_split(ds.sensor_ids(), ds.num_steps(), cfg.split.spatial, cfg.split.temporal, cfg.split.seed)?;
    let protocol = Protocol::new(ds, &manifest)?;
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let periodic = if flags.decoupling { Some(fit_periodic_split(&protocol, cfg.periodic.week_period)?) } else { None };
    timings.periodic_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let (encoder, pretrain_log) = if flags.needs_embeddings() {
        let scalers = fit_scalers(&protocol, periodic.as_ref())?;
        let out = pretrain(&protocol, &scalers, periodic.as_ref(), &cfg.pretrain)?;
        (Some(out.encoder), out.log)
    } else {
        (None, Vec::new())
    };
    timings.pretrain_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let trained = train(&protocol, encoder.as_ref(), periodic.as_ref(), &cfg.train)?;
    timings.train_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let report = evaluate(&protocol, encoder.as_ref(), periodic.as_ref(), &trained.model, &cfg.eval)?;
    timings.eval_seconds = clock.elapsed().as_secs_f64();

    let reads = protocol.into_records();
    Ok(PipelineOutcome {
        manifest,
        periodic,
        encoder,
        pretrain_log,
        model: trained.model,
        train_log: trained.log,
        report,
        reads,
        timings,
    })
}
