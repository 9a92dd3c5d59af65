//! Traffic datasets: in-memory representation, CSV formats, the synthetic
//! generator, standard scaling and sliding-window batching.

mod io;
mod scaler;
mod synth;
mod window;

use std::collections::HashMap;

use chrono::{NaiveDateTime, TimeDelta};

use crate::error::{Error, Result};

pub use io::{
    load_dataset, load_new_roads, parse_timestamp, save_dataset, write_timestamp, ADJACENCY_FILE, SIGNALS_FILE,
};
pub use scaler::{fit_scaler, Scaler};
pub use synth::{generate_synthetic, SynthConfig, SyntheticData};
pub use window::{window_count, window_iter, WindowBatch, WindowIter, WindowSource};

/// Sampling interval of every dataset.
pub const STEP_MINUTES: i64 = 5;
/// Timesteps per day at five-minute granularity.
pub const STEPS_PER_DAY: usize = 288;

/// Speeds for `M` sensors over `K` timesteps with an observation mask and a
/// weighted sensor graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficDataset {
    sensor_ids: Vec<String>,
    timestamps: Vec<NaiveDateTime>,
    /// `M × K`, row-major by sensor. Unobserved cells hold 0.0.
    values: Vec<f64>,
    observed: Vec<bool>,
    /// `M × M`, weights in [0, 1], unit diagonal.
    adjacency: Vec<f64>,
}

impl TrafficDataset {
    /// Builds a dataset, masking non-positive speeds and checking invariants.
    ///
    /// `values` is `M × K` row-major; `observed[i]` false marks a missing
    /// cell. The adjacency diagonal is forced to 1.
    pub fn new(
        sensor_ids: Vec<String>,
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        observed: Vec<bool>,
        mut adjacency: Vec<f64>,
    ) -> Result<Self> {
        let m = sensor_ids.len();
        let k = timestamps.len();
        if m == 0 || k == 0 {
            return Err(Error::invalid("dataset needs at least one sensor and one timestep"));
        }
        if values.len() != m * k || observed.len() != m * k {
            return Err(Error::invalid(format!("value matrix has {} cells, expected {m}×{k}", values.len())));
        }
        if adjacency.len() != m * m {
            return Err(Error::invalid(format!("adjacency has {} cells, expected {m}×{m}", adjacency.len())));
        }
        let mut seen = HashMap::new();
        for (i, id) in sensor_ids.iter().enumerate() {
            if let Some(prev) = seen.insert(id.as_str(), i) {
                return Err(Error::invalid(format!("duplicate sensor id {id:?} (columns {prev} and {i})")));
            }
        }
        check_timestamps(&timestamps)?;
        for (i, w) in adjacency.iter().enumerate() {
            if !(0.0..=1.0).contains(w) {
                return Err(Error::invalid(format!(
                    "adjacency weight {w} between {} and {} outside [0, 1]",
                    sensor_ids[i / m],
                    sensor_ids[i % m]
                )));
            }
        }
        for i in 0..m {
            adjacency[i * m + i] = 1.0;
        }
        let mut values = values;
        let mut observed = observed;
        for (v, o) in values.iter_mut().zip(observed.iter_mut()) {
            if *o && !v.is_finite() {
                return Err(Error::invalid("non-finite observed value"));
            }
            if *o && *v == 0.0 {
                *o = false;
            }
            if !*o {
                *v = 0.0;
            }
        }
        Ok(Self { sensor_ids, timestamps, values, observed, adjacency })
    }

    pub fn num_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn num_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn sensor_index(&self, id: &str) -> Option<usize> {
        self.sensor_ids.iter().position(|s| s == id)
    }

    /// Speed row of one sensor (0.0 where unobserved).
    pub fn row(&self, sensor: usize) -> &[f64] {
        let k = self.num_steps();
        &self.values[sensor * k..(sensor + 1) * k]
    }

    pub fn observed_row(&self, sensor: usize) -> &[bool] {
        let k = self.num_steps();
        &self.observed[sensor * k..(sensor + 1) * k]
    }

    pub fn value(&self, sensor: usize, step: usize) -> f64 {
        self.values[sensor * self.num_steps() + step]
    }

    pub fn is_observed(&self, sensor: usize, step: usize) -> bool {
        self.observed[sensor * self.num_steps() + step]
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.adjacency[from * self.num_sensors() + to]
    }

    /// Adjacency restricted to `sensors`, in the given order.
    pub fn sub_adjacency(&self, sensors: &[usize]) -> Vec<f64> {
        let n = sensors.len();
        let mut out = vec![0.0; n * n];
        for (i, &a) in sensors.iter().enumerate() {
            for (j, &b) in sensors.iter().enumerate() {
                out[i * n + j] = self.weight(a, b);
            }
        }
        out
    }

    /// Mean of all observed values.
    pub fn observed_mean(&self) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .zip(&self.observed)
            .filter(|(_, o)| **o)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        sum / n.max(1) as f64
    }
}

/// Strictly increasing at five-minute steps; gaps of whole days are allowed
/// so weekday-only recordings can skip weekends.
fn check_timestamps(ts: &[NaiveDateTime]) -> Result<()> {
    let step = TimeDelta::minutes(STEP_MINUTES);
    let day = TimeDelta::days(1);
    for (i, w) in ts.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if gap <= TimeDelta::zero() {
            return Err(Error::invalid(format!("timestamps not increasing at row {}", i + 2)));
        }
        let extra = gap - step;
        let whole_days = extra.num_seconds() % day.num_seconds() == 0;
        if gap != step && !(extra > TimeDelta::zero() && whole_days) {
            return Err(Error::invalid(format!(
                "timestamp step at row {} is {} minutes, expected {STEP_MINUTES}",
                i + 2,
                gap.num_minutes()
            )));
        }
    }
    Ok(())
}
