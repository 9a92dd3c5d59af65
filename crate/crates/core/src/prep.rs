//! Scaling and channel layout shared by pre-training, training and inference.
//!
//! With decoupling on, every road carries two scaled channels, raw speed and
//! the residual `x - s(k)`; the encoder and the forecast target both use the
//! residual. Without decoupling only the raw channel exists. Missing entries
//! are imputed as 0 in the scaled domain and stay masked as targets.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{Scaler, WindowSource};
use crate::decouple::PeriodicModel;
use crate::error::{Error, Result};
use crate::split::{DatasetView, Label, Protocol, Purpose};

/// Raw-speed scaler plus, with decoupling, a residual scaler; both fit on set A.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub raw: Scaler,
    pub residual: Option<Scaler>,
}

impl Scalers {
    /// Scaler of the forecast target channel.
    pub fn target(&self) -> Scaler {
        self.residual.unwrap_or(self.raw)
    }
}

fn observed_values<'a>(rows: impl Iterator<Item = (&'a [f64], &'a [bool])>) -> Vec<f64> {
    rows.flat_map(|(v, o)| v.iter().zip(o).filter(|(_, &ok)| ok).map(|(x, _)| *x)).collect()
}

/// Fits the scalers on set A through the protocol guard.
pub fn fit_scalers(protocol: &Protocol, periodic: Option<&PeriodicModel>) -> Result<Scalers> {
    let a = protocol.view(Purpose::ScalerFit, &[Label::A])?;
    let rows: Vec<(&[f64], &[bool])> = (0..a.num_sensors()).map(|i| (a.row(i), a.observed_row(i))).collect();
    let raw = Scaler::fit(observed_values(rows.iter().copied()))?;
    let residual = match periodic {
        None => None,
        Some(model) => {
            let ids = a.sensor_ids();
            let mut res = Vec::with_capacity(ids.len());
            for (i, id) in ids.iter().enumerate() {
                res.push(model.decompose_series(id, a.row(i), a.steps.start)?);
            }
            let pairs = res.iter().zip(&rows).map(|(r, (_, o))| (r.as_slice(), *o));
            Some(Scaler::fit(observed_values(pairs))?)
        }
    };
    Ok(Scalers { raw, residual })
}

/// Scaled channels of a set of roads over one time range.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub road_ids: Vec<String>,
    pub steps: Range<usize>,
    pub raw: Vec<Vec<f64>>,
    pub residual: Option<Vec<Vec<f64>>>,
    pub observed: Vec<Vec<bool>>,
}

/// Scales series that start at absolute step `start`.
pub fn prepare(
    road_ids: Vec<String>,
    values: &[&[f64]],
    observed: &[&[bool]],
    start: usize,
    scalers: &Scalers,
    periodic: Option<&PeriodicModel>,
) -> Result<Prepared> {
    if values.len() != road_ids.len() || observed.len() != road_ids.len() {
        return Err(Error::invalid("one series and mask per road required"));
    }
    let len = values.first().map_or(0, |v| v.len());
    if values.iter().zip(observed).any(|(v, o)| v.len() != len || o.len() != len) {
        return Err(Error::invalid("series lengths differ"));
    }
    let scale = |x: &[f64], o: &[bool], s: Scaler| -> Vec<f64> {
        x.iter().zip(o).map(|(&v, &ok)| if ok { s.apply(v) } else { 0.0 }).collect()
    };
    let raw = values.iter().zip(observed).map(|(v, o)| scale(v, o, scalers.raw)).collect();
    let residual = match (periodic, scalers.residual) {
        (None, None) => None,
        (Some(model), Some(rs)) => {
            let mut out = Vec::with_capacity(road_ids.len());
            for ((id, v), o) in road_ids.iter().zip(values).zip(observed) {
                out.push(scale(&model.decompose_series(id, v, start)?, o, rs));
            }
            Some(out)
        }
        _ => return Err(Error::invalid("periodic model and residual scaler must come together")),
    };
    Ok(Prepared {
        road_ids,
        steps: start..start + len,
        raw,
        residual,
        observed: observed.iter().map(|o| o.to_vec()).collect(),
    })
}

/// [`prepare`] over the rows of a dataset view.
pub fn prepare_view(view: &DatasetView, scalers: &Scalers, periodic: Option<&PeriodicModel>) -> Result<Prepared> {
    let n = view.num_sensors();
    let values: Vec<&[f64]> = (0..n).map(|i| view.row(i)).collect();
    let observed: Vec<&[bool]> = (0..n).map(|i| view.observed_row(i)).collect();
    prepare(view.sensor_ids(), &values, &observed, view.steps.start, scalers, periodic)
}

impl Prepared {
    pub fn num_roads(&self) -> usize {
        self.road_ids.len()
    }

    /// Encoder input per road: scaled residual with decoupling, scaled raw otherwise.
    pub fn encoder_series(&self) -> &[Vec<f64>] {
        self.residual.as_deref().unwrap_or(&self.raw)
    }

    pub fn num_channels(&self) -> usize {
        1 + self.residual.is_some() as usize
    }

    /// Window source whose targets are the scaled target channel.
    pub fn window_source(&self) -> WindowSource {
        let mut channels = vec![self.raw.clone()];
        if let Some(r) = &self.residual {
            channels.push(r.clone());
        }
        WindowSource {
            steps: self.steps.clone(),
            channels,
            targets: self.encoder_series().to_vec(),
            target_mask: self.observed.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::decouple::fit_periodic_split;
    use crate::split::make_split;

    #[test]
    fn scalers_fit_on_a_only_and_channels_line_up() {
        let data = generate_synthetic(&SynthConfig { sensors: 10, days: 12, ..Default::default() }).unwrap();
        let ds = &data.dataset;
        let r = [0.7, 0.1, 0.2];
        let s = make_split(ds.sensor_ids(), ds.num_steps(), r, r, 0).unwrap();
        let p = Protocol::new(ds, &s).unwrap();
        let model = fit_periodic_split(&p, 2016).unwrap();
        let sc = fit_scalers(&p, Some(&model)).unwrap();
        let reads = p.records();
        assert!(reads.iter().all(|r| !r.labels.contains(&Label::C) && !r.labels.contains(&Label::I)));

        let view = p.view(Purpose::Evaluation, &[Label::I]).unwrap();
        let prep = prepare_view(&view, &sc, Some(&model)).unwrap();
        assert_eq!(prep.num_channels(), 2);
        let k = view.steps.start + 5;
        let id = &prep.road_ids[0];
        let x = ds.value(view.sensors[0], k);
        let expected = sc.residual.unwrap().apply(x - model.periodic(id, k..k + 1).unwrap()[0]);
        assert!((prep.residual.as_ref().unwrap()[0][5] - expected).abs() < 1e-12);
        assert!((prep.raw[0][5] - sc.raw.apply(x)).abs() < 1e-12);
        let src = prep.window_source();
        assert_eq!(src.targets, prep.residual.clone().unwrap());

        let plain = fit_scalers(&p, None).unwrap();
        assert_eq!(plain.raw, sc.raw);
        assert!(prepare_view(&view, &plain, Some(&model)).is_err());
        assert_eq!(prepare_view(&view, &plain, None).unwrap().num_channels(), 1);
    }
}
