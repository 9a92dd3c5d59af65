//! Command-line front end.
//!
//! Every subcommand starts from the JSON config given with `--config`
//! (or the defaults) and applies its flags on top. Exit status is 0 on
//! success, 1 on usage or validation errors and 2 on runtime failures.
//! Each run records itself in `run_manifest.json` next to its output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backbone::Flags;
use crate::checkpoint::CHECKPOINT_VERSION;
use crate::contrastive::{pretrain, write_pretrain_log, PRETRAIN_LOG};
use crate::data::{generate_synthetic, load_dataset, load_new_roads, save_dataset, TrafficDataset};
use crate::decouple::{fit_periodic_split, PeriodicModel, PERIODIC_VERSION};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::harness::{
    evaluate, forecast_new_roads, seed_grid, train, write_forecasts, write_train_log, Forecaster, REPORT, SEED_GRID,
    TRAIN_LOG,
};
use crate::pipeline::PipelineConfig;
use crate::prep::fit_scalers;
use crate::split::{make_split, Protocol, SplitManifest, SPLIT_VERSION};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "scpt", version, about = "Spatial contrastive pre-training for traffic forecasting on unseen roads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory with signals.csv and adjacency.csv.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Artifact directory for paths not given explicitly.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl From<Toggle> for bool {
    fn from(t: Toggle) -> bool {
        t == Toggle::On
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct FlagArgs {
    #[arg(long, value_enum)]
    pub sga: Option<Toggle>,
    #[arg(long, value_enum)]
    pub adaptive: Option<Toggle>,
    #[arg(long, value_enum)]
    pub decoupling: Option<Toggle>,
}

/// Artifact locations shared by the later stages.
#[derive(Args, Debug, Clone, Default)]
pub struct Artifacts {
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub periodic: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic traffic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sensors: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the data directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition roads and time into the nine-cell split.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the truncated-DCT periodic model.
    FitPeriodic {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long)]
        week_period: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive pre-training of the encoder on set A.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[command(flatten)]
        flags: FlagArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the forecaster on set A.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        #[command(flatten)]
        flags: FlagArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        model_seed: Option<u64>,
        #[arg(long)]
        max_batches: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate on the unseen roads of set I.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        /// Embed each test road from only its most recent steps.
        #[arg(long)]
        history_limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast the next hour for roads absent from training.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        artifacts: Artifacts,
        /// Signals CSV of the new roads.
        #[arg(long)]
        signals: PathBuf,
        /// Optional edge list; edges to roads outside `--signals` are ignored.
        #[arg(long)]
        adjacency: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline over a model-seed × split-seed grid.
    SeedGrid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        model_seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        split_seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Split { .. } => "split",
            Command::FitPeriodic { .. } => "fit-periodic",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Forecast { .. } => "forecast",
            Command::SeedGrid { .. } => "seed-grid",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Split { common, .. }
            | Command::FitPeriodic { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Forecast { common, .. }
            | Command::SeedGrid { common, .. } => common,
        }
    }
}

/// One entry of `run_manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// SHA-256 of the effective config serialized as JSON.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub artifacts: Vec<PathBuf>,
    pub config: Value,
}

pub fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn apply_flags(flags: &mut Flags, args: &FlagArgs) {
    if let Some(t) = args.sga {
        flags.sga = t.into();
    }
    if let Some(t) = args.adaptive {
        flags.adaptive = t.into();
    }
    if let Some(t) = args.decoupling {
        flags.decoupling = t.into();
    }
}

fn base_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data.dir = d.clone();
    }
    if let Some(o) = &common.output {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

/// Applies every flag of `cmd` to the config it starts from.
pub fn effective_config(cmd: &Command) -> Result<PipelineConfig> {
    let mut cfg = base_config(cmd.common())?;
    match cmd {
        Command::Synth { sensors, days, seed, .. } => {
            if let Some(v) = sensors {
                cfg.synth.sensors = *v;
            }
            if let Some(v) = days {
                cfg.synth.days = *v;
            }
            if let Some(v) = seed {
                cfg.synth.seed = *v;
            }
        }
        Command::Split { seed, .. } => {
            if let Some(v) = seed {
                cfg.split.seed = *v;
            }
        }
        Command::FitPeriodic { week_period, .. } => {
            if let Some(v) = week_period {
                cfg.periodic.week_period = *v;
            }
        }
        Command::Pretrain { flags, epochs, seed, temperature, .. } => {
            apply_flags(&mut cfg.train.flags, flags);
            if let Some(v) = epochs {
                cfg.pretrain.epochs = *v;
            }
            if let Some(v) = seed {
                cfg.pretrain.seed = *v;
            }
            if let Some(v) = temperature {
                cfg.pretrain.temperature = *v;
            }
        }
        Command::Train { flags, epochs, model_seed, max_batches, .. } => {
            apply_flags(&mut cfg.train.flags, flags);
            if let Some(v) = epochs {
                cfg.train.epochs = *v;
            }
            if let Some(v) = model_seed {
                cfg.train.model_seed = *v;
            }
            if max_batches.is_some() {
                cfg.train.max_batches_per_epoch = *max_batches;
            }
        }
        Command::Eval { history_limit, .. } => {
            if history_limit.is_some() {
                cfg.eval.history_limit = *history_limit;
            }
        }
        Command::Forecast { .. } | Command::SeedGrid { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Paths<'a> {
    cfg: &'a PipelineConfig,
    artifacts: Artifacts,
}

impl Paths<'_> {
    fn or_default(given: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| out.join(name))
    }
    fn split(&self) -> PathBuf {
        Self::or_default(&self.artifacts.split, &self.cfg.output, "split.json")
    }
    fn periodic(&self) -> PathBuf {
        Self::or_default(&self.artifacts.periodic, &self.cfg.output, "periodic")
    }
    fn encoder(&self) -> PathBuf {
        Self::or_default(&self.artifacts.encoder, &self.cfg.output, "encoder")
    }
    fn model(&self) -> PathBuf {
        Self::or_default(&self.artifacts.model, &self.cfg.output, "model")
    }
}

fn load_data(cfg: &PipelineConfig) -> Result<TrafficDataset> {
    load_dataset(&cfg.data.signals(), &cfg.data.adjacency())
}

fn load_periodic(flags: Flags, paths: &Paths) -> Result<Option<PeriodicModel>> {
    flags.decoupling.then(|| PeriodicModel::load(&paths.periodic())).transpose()
}

fn load_encoder(flags: Flags, paths: &Paths) -> Result<Option<Encoder>> {
    flags.needs_embeddings().then(|| Encoder::load(&paths.encoder())).transpose()
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Adds `record` to the manifest in `dir`, replacing an earlier run of the same command.
fn write_run_manifest(dir: &Path, record: RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RUN_MANIFEST);
    let mut runs: BTreeMap<String, RunRecord> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    runs.insert(record.command.clone(), record);
    let text = serde_json::to_string_pretty(&runs)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn execute(cmd: &Command) -> Result<(PipelineConfig, Vec<PathBuf>, PathBuf)> {
    let mut cfg = effective_config(cmd)?;
    let empty = Artifacts::default();
    let artifacts = match cmd {
        Command::FitPeriodic { artifacts, .. }
        | Command::Pretrain { artifacts, .. }
        | Command::Train { artifacts, .. }
        | Command::Eval { artifacts, .. }
        | Command::Forecast { artifacts, .. } => artifacts.clone(),
        _ => empty,
    };
    let split_path = Paths { cfg: &cfg, artifacts: artifacts.clone() }.split();
    // record the seed of the split actually used
    if !matches!(
        cmd,
        Command::Synth { .. } | Command::Split { .. } | Command::Forecast { .. } | Command::SeedGrid { .. }
    ) {
        cfg.split.seed = SplitManifest::load(&split_path)?.seed;
    }
    let paths = Paths { cfg: &cfg, artifacts };
    let flags = cfg.train.flags;
    let (written, manifest_dir): (Vec<PathBuf>, PathBuf) = match cmd {
        Command::Synth { out, .. } => {
            let dir = out.clone().unwrap_or_else(|| cfg.data.dir.clone());
            let data = generate_synthetic(&cfg.synth)?;
            save_dataset(&data.dataset, &dir)?;
            (vec![dir.join("signals.csv"), dir.join("adjacency.csv")], dir)
        }
        Command::Split { out, .. } => {
            let ds = load_data(&cfg)?;
            let path = out.clone().unwrap_or_else(|| paths.split());
            let m = make_split(ds.sensor_ids(), ds.num_steps(), cfg.split.spatial, cfg.split.temporal, cfg.split.seed)?;
            create_parent(&path)?;
            m.save(&path)?;
            (vec![path.clone()], parent_dir(&path))
        }
        Command::FitPeriodic { out, .. } => {
            let ds = load_data(&cfg)?;
            let split = SplitManifest::load(&paths.split())?;
            let protocol = Protocol::new(&ds, &split)?;
            let dir = out.clone().unwrap_or_else(|| paths.periodic());
            let model = fit_periodic_split(&protocol, cfg.periodic.week_period)?;
            model.save(&dir)?;
            println!("cutoff {} (validation MAE {:?})", model.cutoff, model.validation_mae);
            (vec![dir.clone()], parent_dir(&dir))
        }
        Command::Pretrain { out, .. } => {
            let ds = load_data(&cfg)?;
            let split = SplitManifest::load(&paths.split())?;
            let protocol = Protocol::new(&ds, &split)?;
            let periodic = load_periodic(flags, &paths)?;
            let scalers = fit_scalers(&protocol, periodic.as_ref())?;
            let outcome = pretrain(&protocol, &scalers, periodic.as_ref(), &cfg.pretrain)?;
            let dir = out.clone().unwrap_or_else(|| paths.encoder());
            outcome.encoder.save(&dir)?;
            write_pretrain_log(&dir.join(PRETRAIN_LOG), &outcome.log)?;
            (vec![dir.clone(), dir.join(PRETRAIN_LOG)], parent_dir(&dir))
        }
        Command::Train { out, .. } => {
            let ds = load_data(&cfg)?;
            let split = SplitManifest::load(&paths.split())?;
            let protocol = Protocol::new(&ds, &split)?;
            let periodic = load_periodic(flags, &paths)?;
            let encoder = load_encoder(flags, &paths)?;
            let outcome = train(&protocol, encoder.as_ref(), periodic.as_ref(), &cfg.train)?;
            let dir = out.clone().unwrap_or_else(|| paths.model());
            outcome.model.save(&dir)?;
            write_train_log(&dir.join(TRAIN_LOG), &outcome.log)?;
            (vec![dir.clone(), dir.join(TRAIN_LOG)], parent_dir(&dir))
        }
        Command::Eval { out, .. } => {
            let ds = load_data(&cfg)?;
            let split = SplitManifest::load(&paths.split())?;
            let protocol = Protocol::new(&ds, &split)?;
            let model = Forecaster::load(&paths.model())?;
            let flags = model.flags();
            let periodic = load_periodic(flags, &paths)?;
            let encoder = load_encoder(flags, &paths)?;
            let report = evaluate(&protocol, encoder.as_ref(), periodic.as_ref(), &model, &cfg.eval)?;
            let path = out.clone().unwrap_or_else(|| cfg.output.join(REPORT));
            create_parent(&path)?;
            report.save(&path)?;
            println!(
                "MAE {:.4}  RMSE {:.4}  MAPE {:.2}%  medianMAE12 {}",
                report.average.mae,
                report.average.rmse,
                report.average.mape,
                report.median_mae_12.map_or("n/a".into(), |m| format!("{m:.4}"))
            );
            (vec![path.clone()], parent_dir(&path))
        }
        Command::Forecast { signals, adjacency, out, .. } => {
            let ds = load_new_roads(signals, adjacency.as_deref())?;
            let model = Forecaster::load(&paths.model())?;
            let flags = model.flags();
            let periodic = load_periodic(flags, &paths)?;
            let encoder = load_encoder(flags, &paths)?;
            let fc = forecast_new_roads(&ds, &model, encoder.as_ref(), periodic.as_ref(), cfg.eval.embedding_seed)?;
            let path = out.clone().unwrap_or_else(|| cfg.output.join("forecast.csv"));
            create_parent(&path)?;
            write_forecasts(&path, &ds, &fc)?;
            (vec![path.clone()], parent_dir(&path))
        }
        Command::SeedGrid { model_seeds, split_seeds, out, .. } => {
            let ds = load_data(&cfg)?;
            let grid = seed_grid(&ds, &cfg, model_seeds, split_seeds)?;
            let path = out.clone().unwrap_or_else(|| cfg.output.join(SEED_GRID));
            create_parent(&path)?;
            grid.save(&path)?;
            for c in grid.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("cell ({}, {}) failed: {}", c.model_seed, c.split_seed, c.error.as_deref().unwrap_or(""));
            }
            (vec![path.clone()], parent_dir(&path))
        }
    };
    Ok((cfg, written, manifest_dir))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn record(cmd: &Command, cfg: &PipelineConfig, artifacts: Vec<PathBuf>) -> Result<RunRecord> {
    let seeds = BTreeMap::from([
        ("synth".to_string(), cfg.synth.seed),
        ("split".to_string(), cfg.split.seed),
        ("pretrain".to_string(), cfg.pretrain.seed),
        ("model".to_string(), cfg.train.model_seed),
        ("eval_embedding".to_string(), cfg.eval.embedding_seed),
    ]);
    let versions = BTreeMap::from([
        ("scpt".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("split".to_string(), SPLIT_VERSION.to_string()),
        ("periodic".to_string(), PERIODIC_VERSION.to_string()),
        ("checkpoint".to_string(), CHECKPOINT_VERSION.to_string()),
    ]);
    Ok(RunRecord {
        command: cmd.name().to_string(),
        config_hash: config_hash(cfg)?,
        seeds,
        versions,
        artifacts,
        config: json!(cfg),
    })
}

/// Runs one invocation and returns its exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli.command).and_then(|(cfg, written, dir)| {
        let rec = record(&cli.command, &cfg, written)?;
        write_run_manifest(&dir, rec)
    }) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() || matches!(e, Error::Protocol(_)) {
                1
            } else {
                2
            }
        }
    }
}
