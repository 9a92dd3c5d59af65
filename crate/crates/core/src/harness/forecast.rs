//! Forecasting roads that appear in no training artifact.

use std::io::Write;
use std::path::Path;

use chrono::TimeDelta;

use super::model::{embed_roads, Forecaster, Forecasts};
use crate::backbone::Supports;
use crate::data::{write_timestamp, TrafficDataset, STEPS_PER_DAY, STEP_MINUTES};
use crate::decouple::PeriodicModel;
use crate::encoder::{Encoder, MIN_HISTORY};
use crate::error::{Error, Result};
use crate::prep::prepare;

/// Periodic model of new roads from their own history, reusing the trained
/// cutoff rescaled to the history length. Histories shorter than one
/// extension period fall back to the longest whole number of days.
pub fn fit_new_periodic(ds: &TrafficDataset, trained: &PeriodicModel) -> Result<PeriodicModel> {
    let k = ds.num_steps();
    let period = if k >= trained.week_period { trained.week_period } else { k / STEPS_PER_DAY * STEPS_PER_DAY };
    if period == 0 {
        return Err(Error::invalid(format!("{k} steps of history cover no whole day")));
    }
    let cutoff = ((trained.cutoff * k) as f64 / trained.train_length as f64).round().clamp(1.0, k as f64) as usize;
    let values: Vec<&[f64]> = (0..ds.num_sensors()).map(|i| ds.row(i)).collect();
    let observed: Vec<&[bool]> = (0..ds.num_sensors()).map(|i| ds.observed_row(i)).collect();
    PeriodicModel::fit_with_cutoff(ds.sensor_ids().to_vec(), &values, &observed, cutoff, period)
}

/// Forecasts the hour after the end of each new road's history.
pub fn forecast_new_roads(
    ds: &TrafficDataset,
    model: &Forecaster,
    encoder: Option<&Encoder>,
    trained_periodic: Option<&PeriodicModel>,
    embedding_seed: u64,
) -> Result<Forecasts> {
    let flags = model.flags();
    let encoder = match (flags.needs_embeddings(), encoder) {
        (true, None) => return Err(Error::invalid("this model needs the pre-trained encoder")),
        (true, Some(e)) => Some(e),
        (false, _) => None,
    };
    if encoder.is_some() && ds.num_steps() < MIN_HISTORY {
        return Err(Error::invalid(format!(
            "{} steps of history; the encoder needs at least {MIN_HISTORY} (two days plus one window)",
            ds.num_steps()
        )));
    }
    let periodic = match (flags.decoupling, trained_periodic) {
        (true, None) => return Err(Error::invalid("this model needs the fitted periodic model")),
        (true, Some(p)) => Some(fit_new_periodic(ds, p)?),
        (false, _) => None,
    };
    let values: Vec<&[f64]> = (0..ds.num_sensors()).map(|i| ds.row(i)).collect();
    let observed: Vec<&[bool]> = (0..ds.num_sensors()).map(|i| ds.observed_row(i)).collect();
    let prepared = prepare(ds.sensor_ids().to_vec(), &values, &observed, 0, &model.scalers, periodic.as_ref())?;
    let embeddings = match encoder {
        Some(enc) => Some(embed_roads(enc, &prepared, embedding_seed, None)?),
        None => None,
    };
    let supports = Supports::from_adjacency(ds.adjacency(), ds.num_sensors())?;
    model.forecast_next(&prepared, &supports, embeddings.as_ref(), periodic.as_ref())
}

/// Writes `road_id,horizon,timestamp,speed` rows; timestamps continue the
/// history at the dataset's step.
pub fn write_forecasts(path: &Path, ds: &TrafficDataset, fc: &Forecasts) -> Result<()> {
    let last = *ds.timestamps().last().ok_or_else(|| Error::invalid("empty history"))?;
    let mut out = String::from("road_id,horizon,timestamp,speed\n");
    for (road, id) in fc.road_ids.iter().enumerate() {
        for h in 0..fc.horizon() {
            let t = last + TimeDelta::minutes(STEP_MINUTES * (h as i64 + 1));
            out.push_str(&format!("{id},{},{},{}\n", h + 1, write_timestamp(&t), fc.pred.get(&[0, road, h])));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
