use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::TrafficDataset;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Global standard scaler `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    /// Population mean and std of `values`.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let vals: Vec<f64> = values.into_iter().collect();
        if vals.len() < 2 {
            return Err(Error::invalid("scaler needs at least two observed entries"));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::invalid("scaler fitted on zero-variance data"));
        }
        Ok(Self { mean, std: var.sqrt() })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.apply(v))
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.invert(v))
    }
}

/// Fits on observed entries of `sensors` within `steps` only.
pub fn fit_scaler(ds: &TrafficDataset, sensors: &[usize], steps: Range<usize>) -> Result<Scaler> {
    let values =
        sensors.iter().flat_map(|&s| steps.clone().filter(move |&k| ds.is_observed(s, k)).map(move |k| ds.value(s, k)));
    Scaler::fit(values)
}

#[cfg(test)]
mod tests {
    use chrono::TimeDelta;
    use proptest::prelude::*;

    use super::*;
    use crate::data::parse_timestamp;

    #[test]
    fn two_point_case() {
        let s = Scaler::fit([50.0, 70.0]).unwrap();
        assert_eq!(s, Scaler { mean: 60.0, std: 10.0 });
        assert_eq!(s.apply(70.0), 1.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(Scaler::fit([5.0]).is_err());
        assert!(Scaler::fit([5.0, 5.0, 5.0]).is_err());
    }

    #[test]
    fn masked_zero_does_not_move_the_mean() {
        let start = parse_timestamp("2012-03-01T00:00:00").unwrap();
        let ts: Vec<_> = (0..4).map(|i| start + TimeDelta::minutes(5 * i)).collect();
        let with_gap =
            TrafficDataset::new(vec!["a".into()], ts.clone(), vec![50.0, 0.0, 70.0, 60.0], vec![true; 4], vec![1.0])
                .unwrap();
        let s = fit_scaler(&with_gap, &[0], 0..4).unwrap();
        // hand-computed over the three observed entries
        assert!((s.mean - 60.0).abs() < 1e-12);
        assert!((s.std - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invert_undoes_apply(mean in -100.0..100.0f64, std in 0.1..50.0f64, x in -1e3..1e3f64) {
            let s = Scaler { mean, std };
            prop_assert!((s.invert(s.apply(x)) - x).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }
}
