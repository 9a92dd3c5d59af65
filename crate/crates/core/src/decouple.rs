//! Road-wise DCT decoupling of traffic into a periodic signal `s(k)` and a
//! Markovian residual `x - s`.
//!
//! Each road's training-period series is transformed with an orthonormal
//! DCT-II; keeping the first `cutoff` coefficients and inverting gives the
//! periodic reconstruction on the training domain. Past the training domain
//! `s(k)` repeats the last `week_period` steps of the reconstruction.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_f64_le, write_f64_le};
use crate::error::{Error, Result};
use crate::split::{DatasetView, Label, Protocol, Purpose};

pub const PERIODIC_VERSION: u32 = 1;
pub const PERIODIC_HEADER: &str = "periodic.json";
pub const PERIODIC_DATA: &str = "periodic.bin";

/// Orthonormal DCT-II / DCT-III pair of a fixed length.
struct Dct {
    plan: Arc<dyn TransformType2And3<f64>>,
    len: usize,
}

impl Dct {
    fn new(len: usize) -> Self {
        Self { plan: DctPlanner::new().plan_dct2(len), len }
    }

    fn forward(&self, buf: &mut [f64]) {
        self.plan.process_dct2(buf);
        let n = self.len as f64;
        buf[0] *= (1.0 / n).sqrt();
        let s = (2.0 / n).sqrt();
        buf[1..].iter_mut().for_each(|c| *c *= s);
    }

    fn inverse(&self, buf: &mut [f64]) {
        let n = self.len as f64;
        // rustdct's DCT-III halves the DC term
        buf[0] *= 2.0 * (1.0 / n).sqrt();
        let s = (2.0 / n).sqrt();
        buf[1..].iter_mut().for_each(|c| *c *= s);
        self.plan.process_dct3(buf);
    }
}

/// Orthonormal DCT-II of `x`.
pub fn dct_forward(x: &[f64]) -> Vec<f64> {
    let mut buf = x.to_vec();
    if !buf.is_empty() {
        Dct::new(buf.len()).forward(&mut buf);
    }
    buf
}

/// Orthonormal DCT-III, the inverse of [`dct_forward`].
pub fn dct_inverse(c: &[f64]) -> Vec<f64> {
    let mut buf = c.to_vec();
    if !buf.is_empty() {
        Dct::new(buf.len()).inverse(&mut buf);
    }
    buf
}

/// Fitted periodic component for a fixed set of roads.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicModel {
    pub road_ids: Vec<String>,
    pub cutoff: usize,
    /// Kept low-frequency coefficients, `cutoff` per road.
    pub coefficients: Vec<Vec<f64>>,
    pub train_length: usize,
    pub week_period: usize,
    /// Inverse DCT of the zero-padded kept coefficients, `train_length` per road.
    pub reconstruction: Vec<Vec<f64>>,
    /// Masked MAE of `s(k)` against the validation slice, when selected by search.
    pub validation_mae: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    cutoff: usize,
    train_length: usize,
    week_period: usize,
    road_ids: Vec<String>,
    validation_mae: Option<f64>,
    arrays: Vec<HeaderArray>,
}

#[derive(Serialize, Deserialize)]
struct HeaderArray {
    name: String,
    shape: Vec<usize>,
}

/// Periodic and residual parts of a view.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub periodic: Vec<Vec<f64>>,
    pub residual: Vec<Vec<f64>>,
}

fn check_lengths(train_length: usize, week_period: usize) -> Result<()> {
    if week_period == 0 {
        return Err(Error::invalid("week_period must be positive"));
    }
    if train_length < week_period {
        return Err(Error::invalid(format!(
            "training range of {train_length} steps is shorter than week_period {week_period}"
        )));
    }
    Ok(())
}

/// Training series with missing entries replaced by the road's observed mean
/// (the all-road mean for roads with nothing observed).
fn mean_filled(values: &[&[f64]], observed: &[&[bool]]) -> Result<Vec<Vec<f64>>> {
    let mean_of = |v: &[f64], o: &[bool]| {
        let (s, n) = v.iter().zip(o).filter(|(_, &ok)| ok).fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    let (total, count) = values.iter().zip(observed).fold((0.0, 0usize), |(s, n), (v, o)| {
        let obs: Vec<f64> = v.iter().zip(o.iter()).filter(|(_, &ok)| ok).map(|(x, _)| *x).collect();
        (s + obs.iter().sum::<f64>(), n + obs.len())
    });
    if count == 0 {
        return Err(Error::invalid("training slice has no observed entries"));
    }
    let global = total / count as f64;
    Ok(values
        .iter()
        .zip(observed)
        .map(|(v, o)| {
            let fill = mean_of(v, o).unwrap_or(global);
            v.iter().zip(o.iter()).map(|(&x, &ok)| if ok { x } else { fill }).collect()
        })
        .collect())
}

impl PeriodicModel {
    /// Builds the model from kept coefficients.
    pub fn from_coefficients(
        road_ids: Vec<String>,
        coefficients: Vec<Vec<f64>>,
        train_length: usize,
        week_period: usize,
    ) -> Result<Self> {
        check_lengths(train_length, week_period)?;
        let cutoff = coefficients.first().map_or(0, Vec::len);
        if cutoff == 0 || cutoff > train_length {
            return Err(Error::invalid(format!("cutoff {cutoff} outside [1, {train_length}]")));
        }
        if coefficients.len() != road_ids.len() || coefficients.iter().any(|c| c.len() != cutoff) {
            return Err(Error::invalid("one coefficient vector of length cutoff per road required"));
        }
        let dct = Dct::new(train_length);
        let reconstruction = coefficients
            .iter()
            .map(|c| {
                let mut buf = vec![0.0; train_length];
                buf[..cutoff].copy_from_slice(c);
                dct.inverse(&mut buf);
                buf
            })
            .collect();
        Ok(Self { road_ids, cutoff, coefficients, train_length, week_period, reconstruction, validation_mae: None })
    }

    /// Truncates each road's training-series DCT at a given cutoff.
    pub fn fit_with_cutoff(
        road_ids: Vec<String>,
        train_values: &[&[f64]],
        train_observed: &[&[bool]],
        cutoff: usize,
        week_period: usize,
    ) -> Result<Self> {
        let t = train_values.first().map_or(0, |v| v.len());
        check_lengths(t, week_period)?;
        let filled = mean_filled(train_values, train_observed)?;
        let dct = Dct::new(t);
        let coefficients = filled
            .into_iter()
            .map(|mut v| {
                dct.forward(&mut v);
                v.truncate(cutoff.min(t));
                v
            })
            .collect();
        Self::from_coefficients(road_ids, coefficients, t, week_period)
    }

    pub fn num_roads(&self) -> usize {
        self.road_ids.len()
    }

    pub fn road_index(&self, id: &str) -> Result<usize> {
        self.road_ids
            .iter()
            .position(|r| r == id)
            .ok_or_else(|| Error::invalid(format!("periodic model has no road {id:?}")))
    }

    /// Position in the reconstruction that defines `s(k)`.
    pub fn source_index(&self, k: usize) -> usize {
        let t = self.train_length;
        if k < t {
            k
        } else {
            t - self.week_period + (k - t) % self.week_period
        }
    }

    /// `s(k)` for road position `road`.
    pub fn value(&self, road: usize, k: usize) -> f64 {
        self.reconstruction[road][self.source_index(k)]
    }

    pub fn periodic(&self, road_id: &str, steps: std::ops::Range<usize>) -> Result<Vec<f64>> {
        let r = self.road_index(road_id)?;
        Ok(steps.map(|k| self.value(r, k)).collect())
    }

    /// Subtracts `s(k)` from a series starting at step `start`.
    pub fn decompose_series(&self, road_id: &str, values: &[f64], start: usize) -> Result<Vec<f64>> {
        let r = self.road_index(road_id)?;
        Ok(values.iter().enumerate().map(|(i, x)| x - self.value(r, start + i)).collect())
    }

    /// Adds `s(k)` back at the given target steps.
    pub fn recouple(&self, road_id: &str, forecast: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
        if forecast.len() != indices.len() {
            return Err(Error::invalid("forecast and index lengths differ"));
        }
        let r = self.road_index(road_id)?;
        Ok(forecast.iter().zip(indices).map(|(y, &k)| y + self.value(r, k)).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = Header {
            version: PERIODIC_VERSION,
            cutoff: self.cutoff,
            train_length: self.train_length,
            week_period: self.week_period,
            road_ids: self.road_ids.clone(),
            validation_mae: self.validation_mae,
            arrays: vec![HeaderArray { name: "coefficients".into(), shape: vec![self.num_roads(), self.cutoff] }],
        };
        let path = dir.join(PERIODIC_HEADER);
        fs::write(&path, serde_json::to_string_pretty(&header)? + "\n").map_err(|e| Error::io(&path, e))?;
        let flat: Vec<f64> = self.coefficients.concat();
        write_f64_le(&dir.join(PERIODIC_DATA), &flat)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PERIODIC_HEADER);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: Header = serde_json::from_str(&text)?;
        let bad = |msg: String| Error::Checkpoint { path: path.clone(), msg };
        if h.version != PERIODIC_VERSION {
            return Err(bad(format!("unsupported version {}", h.version)));
        }
        let expected = [h.road_ids.len(), h.cutoff];
        if h.arrays.len() != 1 || h.arrays[0].shape != expected {
            return Err(bad(format!("coefficient array shape must be {expected:?}")));
        }
        let flat = read_f64_le(&dir.join(PERIODIC_DATA))?;
        if flat.len() != h.road_ids.len() * h.cutoff {
            return Err(bad(format!("expected {} values, found {}", h.road_ids.len() * h.cutoff, flat.len())));
        }
        let coefficients = flat.chunks(h.cutoff).map(<[f64]>::to_vec).collect();
        let mut m = Self::from_coefficients(h.road_ids, coefficients, h.train_length, h.week_period)?;
        m.validation_mae = h.validation_mae;
        Ok(m)
    }
}

/// Geometric cutoff grid `{1, 2, 4, …} ∪ {T}`.
pub fn cutoff_grid(t: usize) -> Vec<usize> {
    let mut grid: Vec<usize> =
        std::iter::successors(Some(1usize), |c| c.checked_mul(2)).take_while(|&c| c < t).collect();
    grid.push(t);
    grid
}

struct Search<'a> {
    coeffs: &'a [Vec<f64>],
    val_values: &'a [&'a [f64]],
    val_observed: &'a [&'a [bool]],
    t: usize,
    p: usize,
    count: usize,
}

impl Search<'_> {
    /// Masked MAE of the extension of per-road reconstruction tails.
    fn mae(&self, tails: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for ((tail, v), o) in tails.iter().zip(self.val_values).zip(self.val_observed) {
            for (j, (x, &ok)) in v.iter().zip(o.iter()).enumerate() {
                if ok {
                    total += (tail[j % self.p] - x).abs();
                }
            }
        }
        total / self.count as f64
    }

    /// Last-week tails of the reconstruction at `cutoff` via the inverse DCT.
    fn tails(&self, dct: &Dct, cutoff: usize) -> Vec<Vec<f64>> {
        self.coeffs
            .iter()
            .map(|c| {
                let mut buf = vec![0.0; self.t];
                buf[..cutoff].copy_from_slice(&c[..cutoff]);
                dct.inverse(&mut buf);
                buf[self.t - self.p..].to_vec()
            })
            .collect()
    }

    /// Adds coefficient `j`'s basis contribution to every tail.
    fn add_term(&self, tails: &mut [Vec<f64>], j: usize) {
        let t = self.t as f64;
        let scale = if j == 0 { (1.0 / t).sqrt() } else { (2.0 / t).sqrt() };
        let basis: Vec<f64> = (self.t - self.p..self.t)
            .map(|n| scale * (std::f64::consts::PI * j as f64 * (n as f64 + 0.5) / t).cos())
            .collect();
        for (tail, c) in tails.iter_mut().zip(self.coeffs) {
            for (x, b) in tail.iter_mut().zip(&basis) {
                *x += c[j] * b;
            }
        }
    }
}

/// Selects one global cutoff by masked validation MAE of the extended `s(k)`.
///
/// The validation series must start right after the training series. Grid
/// points are evaluated first, then every cutoff strictly between the grid
/// neighbours of the best grid point. Ties go to the smaller cutoff.
pub fn fit_periodic_series(
    road_ids: Vec<String>,
    train_values: &[&[f64]],
    train_observed: &[&[bool]],
    val_values: &[&[f64]],
    val_observed: &[&[bool]],
    week_period: usize,
) -> Result<PeriodicModel> {
    let m = road_ids.len();
    if m == 0
        || train_values.len() != m
        || train_observed.len() != m
        || val_values.len() != m
        || val_observed.len() != m
    {
        return Err(Error::invalid("one training and validation series per road required"));
    }
    let t = train_values[0].len();
    check_lengths(t, week_period)?;
    if train_values.iter().zip(train_observed).any(|(v, o)| v.len() != t || o.len() != t) {
        return Err(Error::invalid("training series lengths differ"));
    }
    let count: usize = val_observed.iter().map(|o| o.iter().filter(|&&b| b).count()).sum();
    if count == 0 {
        return Err(Error::invalid("validation slice is empty"));
    }
    let filled = mean_filled(train_values, train_observed)?;
    let dct = Dct::new(t);
    let coeffs: Vec<Vec<f64>> = filled
        .into_iter()
        .map(|mut v| {
            dct.forward(&mut v);
            v
        })
        .collect();
    let search = Search { coeffs: &coeffs, val_values, val_observed, t, p: week_period, count };

    let grid = cutoff_grid(t);
    let grid_tails: Vec<Vec<Vec<f64>>> = grid.iter().map(|&c| search.tails(&dct, c)).collect();
    let grid_mae: Vec<f64> = grid_tails.iter().map(|tails| search.mae(tails)).collect();
    let mut best = (grid[0], grid_mae[0]);
    let mut best_i = 0;
    for (i, (&c, &e)) in grid.iter().zip(&grid_mae).enumerate() {
        if e < best.1 {
            best = (c, e);
            best_i = i;
        }
    }
    let lo_i = best_i.saturating_sub(1);
    let hi = grid[(best_i + 1).min(grid.len() - 1)];
    let mut tails = grid_tails[lo_i].clone();
    for c in grid[lo_i] + 1..hi {
        search.add_term(&mut tails, c - 1);
        if grid.contains(&c) {
            continue;
        }
        let e = search.mae(&tails);
        if e < best.1 || (e == best.1 && c < best.0) {
            best = (c, e);
        }
    }

    let kept = coeffs.iter().map(|c| c[..best.0].to_vec()).collect();
    let mut model = PeriodicModel::from_coefficients(road_ids, kept, t, week_period)?;
    model.validation_mae = Some(best.1);
    Ok(model)
}

/// Fits on the views' rows; `val` must directly follow `train` in time and
/// hold the same roads, and `train` must start at step 0.
pub fn fit_periodic(train: &DatasetView, val: &DatasetView, week_period: usize) -> Result<PeriodicModel> {
    if train.sensors != val.sensors {
        return Err(Error::invalid("training and validation views cover different roads"));
    }
    if train.steps.start != 0 || val.steps.start != train.steps.end {
        return Err(Error::invalid("validation range must directly follow a training range starting at 0"));
    }
    let n = train.num_sensors();
    let tv: Vec<&[f64]> = (0..n).map(|i| train.row(i)).collect();
    let to: Vec<&[bool]> = (0..n).map(|i| train.observed_row(i)).collect();
    let vv: Vec<&[f64]> = (0..n).map(|i| val.row(i)).collect();
    let vo: Vec<&[bool]> = (0..n).map(|i| val.observed_row(i)).collect();
    fit_periodic_series(train.sensor_ids(), &tv, &to, &vv, &vo, week_period)
}

/// Fits on `A ∪ D ∪ G` and validates on `B ∪ E ∪ H` through the protocol guard.
pub fn fit_periodic_split(protocol: &Protocol, week_period: usize) -> Result<PeriodicModel> {
    let train = protocol.view(Purpose::DecouplingFit, &[Label::A, Label::D, Label::G])?;
    let val = protocol.view(Purpose::DecouplingFit, &[Label::B, Label::E, Label::H])?;
    fit_periodic(&train, &val, week_period)
}

/// Splits every row of `view` into `s(k)` and `x - s(k)`.
pub fn decompose(view: &DatasetView, model: &PeriodicModel) -> Result<Decomposition> {
    let ids = view.sensor_ids();
    let mut periodic = Vec::with_capacity(ids.len());
    let mut residual = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let s = model.periodic(id, view.steps.clone())?;
        residual.push(view.row(i).iter().zip(&s).map(|(x, p)| x - p).collect());
        periodic.push(s);
    }
    Ok(Decomposition { periodic, residual })
}
