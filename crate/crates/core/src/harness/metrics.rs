//! Masked forecast metrics in mph.
//!
//! Entries are scored only where the mask is set and the truth is non-zero;
//! zero speeds are treated as sensor dropouts (and would make MAPE undefined).

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

/// Running sums for [`Metrics`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSums {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
}

impl MetricSums {
    pub fn push(&mut self, pred: f64, truth: f64) {
        let d = pred - truth;
        self.abs += d.abs();
        self.sq += d * d;
        self.ape += d.abs() / truth.abs();
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::invalid("no valid targets to score"));
        }
        let n = self.count as f64;
        Ok(Metrics { mae: self.abs / n, rmse: (self.sq / n).sqrt(), mape: 100.0 * self.ape / n })
    }
}

fn scored(mask: bool, truth: f64) -> bool {
    mask && truth != 0.0
}

fn check(pred: &Tensor, truth: &Tensor, mask: &[bool]) -> Result<()> {
    if pred.shape() != truth.shape() || mask.len() != truth.numel() {
        return Err(Error::invalid(format!(
            "prediction {:?}, truth {:?} and mask of {} do not line up",
            pred.shape(),
            truth.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// MAE, RMSE and MAPE over every scored entry.
pub fn metrics(pred: &Tensor, truth: &Tensor, mask: &[bool]) -> Result<Metrics> {
    check(pred, truth, mask)?;
    let mut sums = MetricSums::default();
    for ((&p, &t), &m) in pred.data().iter().zip(truth.data()).zip(mask) {
        if scored(m, t) {
            sums.push(p, t);
        }
    }
    sums.finish()
}

/// Metrics per horizon step for `[W, N, F]` tensors.
pub fn horizon_metrics(pred: &Tensor, truth: &Tensor, mask: &[bool]) -> Result<Vec<Metrics>> {
    check(pred, truth, mask)?;
    let f = *pred.shape().last().ok_or_else(|| Error::invalid("scalar forecasts"))?;
    let mut sums = vec![MetricSums::default(); f];
    for (i, ((&p, &t), &m)) in pred.data().iter().zip(truth.data()).zip(mask).enumerate() {
        if scored(m, t) {
            sums[i % f].push(p, t);
        }
    }
    sums.iter().map(MetricSums::finish).collect()
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[m] } else { 0.5 * (values[m - 1] + values[m]) })
}

/// Median over roads of each road's MAE at horizon index `h` of `[W, N, F]` tensors.
///
/// Roads with no scored entry at `h` are skipped.
pub fn median_road_mae(pred: &Tensor, truth: &Tensor, mask: &[bool], h: usize) -> Result<f64> {
    check(pred, truth, mask)?;
    let s = pred.shape();
    if s.len() != 3 || h >= s[2] {
        return Err(Error::invalid(format!("horizon index {h} outside forecasts {s:?}")));
    }
    let (w, n, f) = (s[0], s[1], s[2]);
    let mut per_road = Vec::with_capacity(n);
    for road in 0..n {
        let (mut total, mut count) = (0.0, 0usize);
        for win in 0..w {
            let i = (win * n + road) * f + h;
            let t = truth.data()[i];
            if scored(mask[i], t) {
                total += (pred.data()[i] - t).abs();
                count += 1;
            }
        }
        if count > 0 {
            per_road.push(total / count as f64);
        }
    }
    median(&mut per_road).ok_or_else(|| Error::invalid(format!("no road has a valid target at horizon {}", h + 1)))
}

/// Median per-road MAE one hour (12 steps) ahead.
pub fn median_mae_12(pred: &Tensor, truth: &Tensor, mask: &[bool]) -> Result<f64> {
    median_road_mae(pred, truth, mask, 11)
}
