//! Evaluation on held-out cells of the split, by default the unseen roads in set I.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{horizon_metrics, median_mae_12, Metrics};
use super::model::{embed_roads, Forecaster, Forecasts};
use super::train::resolve_inputs;
use crate::backbone::{Flags, Supports};
use crate::decouple::PeriodicModel;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::prep::prepare_view;
use crate::split::{Label, Protocol, Purpose};

pub const REPORT: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Sampling seed of the encoder's day slots.
    pub embedding_seed: u64,
    /// Use only the most recent steps of each road's history for its embedding.
    pub history_limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 64, embedding_seed: 0, history_limit: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based steps ahead.
    pub horizon: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub embed_seconds: f64,
    pub forecast_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: Label,
    pub history: Vec<Label>,
    pub flags: Flags,
    pub roads: usize,
    pub windows: usize,
    pub horizons: Vec<HorizonMetrics>,
    /// Mean of the per-horizon metrics.
    pub average: Metrics,
    /// Absent when forecasts stop short of one hour.
    #[serde(rename = "medianMAE12")]
    pub median_mae_12: Option<f64>,
    pub timings: Timings,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn mae_at(&self, horizon: usize) -> Option<f64> {
        self.horizons.iter().find(|h| h.horizon == horizon).map(|h| h.metrics.mae)
    }
}

/// Forecasts with their aligned truth and score mask.
#[derive(Clone, Debug)]
pub struct Scored {
    pub forecasts: Forecasts,
    pub truth: crate::autograd::Tensor,
    pub mask: Vec<bool>,
}

/// Evaluates on set I with encoder inputs from `G ∪ H`.
pub fn evaluate(
    protocol: &Protocol,
    encoder: Option<&Encoder>,
    periodic: Option<&PeriodicModel>,
    model: &Forecaster,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_on(protocol, &[Label::G, Label::H], Label::I, encoder, periodic, model, cfg).map(|(r, _)| r)
}

/// Evaluates windows inside `target`; embeddings come from `history`, which
/// must cover the same roads.
pub fn evaluate_on(
    protocol: &Protocol,
    history: &[Label],
    target: Label,
    encoder: Option<&Encoder>,
    periodic: Option<&PeriodicModel>,
    model: &Forecaster,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Scored)> {
    let flags = model.flags();
    let periodic = resolve_inputs(flags, encoder, periodic)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("evaluation batch_size must be positive".into()));
    }
    let view = protocol.view(Purpose::Evaluation, &[target])?;
    let prepared = prepare_view(&view, &model.scalers, periodic)?;

    let started = Instant::now();
    let embeddings = match encoder.filter(|_| flags.needs_embeddings()) {
        Some(enc) => {
            let hv = protocol.view(Purpose::Evaluation, history)?;
            if hv.sensors != view.sensors {
                return Err(Error::invalid(format!("history {history:?} and target {target} cover different roads")));
            }
            Some(embed_roads(
                enc,
                &prepare_view(&hv, &model.scalers, periodic)?,
                cfg.embedding_seed,
                cfg.history_limit,
            )?)
        }
        None => None,
    };
    let embed_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let supports = Supports::from_adjacency(&view.adjacency, view.num_sensors())?;
    let forecasts = model.forecast_windows(&prepared, &supports, embeddings.as_ref(), periodic, cfg.batch_size)?;
    let forecast_seconds = started.elapsed().as_secs_f64();

    let values: Vec<&[f64]> = (0..view.num_sensors()).map(|i| view.row(i)).collect();
    let observed: Vec<&[bool]> = (0..view.num_sensors()).map(|i| view.observed_row(i)).collect();
    let (truth, mask) = forecasts.truth(&values, &observed, view.steps.start)?;
    let per_h = horizon_metrics(&forecasts.pred, &truth, &mask)?;
    let f = per_h.len() as f64;
    let average = Metrics {
        mae: per_h.iter().map(|m| m.mae).sum::<f64>() / f,
        rmse: per_h.iter().map(|m| m.rmse).sum::<f64>() / f,
        mape: per_h.iter().map(|m| m.mape).sum::<f64>() / f,
    };
    let median = if forecasts.horizon() >= 12 { Some(median_mae_12(&forecasts.pred, &truth, &mask)?) } else { None };
    let report = EvalReport {
        target,
        history: history.to_vec(),
        flags,
        roads: view.num_sensors(),
        windows: forecasts.window_starts.len(),
        horizons: per_h
            .into_iter()
            .enumerate()
            .map(|(h, metrics)| HorizonMetrics { horizon: h + 1, metrics })
            .collect(),
        average,
        median_mae_12: median,
        timings: Timings { embed_seconds, forecast_seconds },
    };
    Ok((report, Scored { forecasts, truth, mask }))
}
