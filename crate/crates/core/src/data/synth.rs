use chrono::{Datelike, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{parse_timestamp, TrafficDataset, STEPS_PER_DAY, STEP_MINUTES};
use crate::error::{Error, Result};

/// Synthetic traffic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sensors: usize,
    pub days: usize,
    pub seed: u64,
    /// Share of the residual propagated from graph neighbours each step, in [0, 1].
    pub diffusion_strength: f64,
    /// Residual innovation scale (mph); observation noise is a quarter of it.
    pub noise_std: f64,
    /// 7 for every day of the week, 5 for weekdays only.
    pub week_days: usize,
    /// Fraction of cells randomly dropped to the missing sentinel.
    pub missing_rate: f64,
    /// Connection radius of the random geometric graph in the unit square.
    pub radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sensors: 20,
            days: 14,
            seed: 0,
            diffusion_strength: 0.5,
            noise_std: 1.5,
            week_days: 7,
            missing_rate: 0.0,
            radius: 0.35,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sensors < 4 {
            return Err(Error::Config(format!("synthetic sensors must be ≥ 4, got {}", self.sensors)));
        }
        if self.days < 4 {
            return Err(Error::Config(format!("synthetic days must be ≥ 4, got {}", self.days)));
        }
        if !(0.0..=1.0).contains(&self.diffusion_strength) {
            return Err(Error::Config("diffusion_strength must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0) || !(0.0..1.0).contains(&self.missing_rate) || !(self.radius > 0.0) {
            return Err(Error::Config("noise_std ≥ 0, missing_rate in [0, 1) and radius > 0 required".into()));
        }
        if self.week_days != 7 && self.week_days != 5 {
            return Err(Error::Config("week_days must be 5 or 7".into()));
        }
        Ok(())
    }

    /// Period of the weekly profile in timesteps.
    pub fn week_period(&self) -> usize {
        self.week_days * STEPS_PER_DAY
    }
}

/// Generator output: the dataset plus its exact periodic component.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: TrafficDataset,
    /// `M × K` noiseless weekly profile, row-major by sensor.
    pub periodic: Vec<f64>,
}

struct Profile {
    base: f64,
    morning: (f64, f64, f64),
    evening: (f64, f64, f64),
    ar_coef: f64,
    residual_scale: f64,
}

impl Profile {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            base: rng.random_range(55.0..65.0),
            morning: (rng.random_range(10.0..25.0), 8.0 + rng.random_range(-0.5..0.5), rng.random_range(0.75..1.25)),
            evening: (rng.random_range(8.0..20.0), 17.5 + rng.random_range(-0.5..0.5), rng.random_range(1.0..1.5)),
            ar_coef: rng.random_range(0.85..0.98),
            residual_scale: rng.random_range(0.5..1.5),
        }
    }

    /// Speed at `hour` of a day whose congestion is scaled by `intensity`.
    fn speed(&self, hour: f64, intensity: f64) -> f64 {
        let dip = |(depth, centre, width): (f64, f64, f64)| depth * (-0.5 * ((hour - centre) / width).powi(2)).exp();
        self.base - intensity * (dip(self.morning) + dip(self.evening))
    }
}

/// Congestion multiplier by weekday (Monday = 0).
fn day_intensity(weekday: u32) -> f64 {
    match weekday {
        5 | 6 => 0.3,
        d => 1.0 + 0.15 * (2.0 * std::f64::consts::PI * d as f64 / 7.0).cos(),
    }
}

/// Weekly profile + graph-diffused AR(1) residual + white noise on a random
/// geometric graph, deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.sensors;
    let start = parse_timestamp("2012-03-05T00:00:00").expect("valid literal");

    let positions: Vec<(f64, f64)> = (0..m).map(|_| (rng.random(), rng.random())).collect();
    let mut adjacency = vec![0.0; m * m];
    let sigma = cfg.radius / 2.0;
    for i in 0..m {
        for j in 0..m {
            let d = ((positions[i].0 - positions[j].0).powi(2) + (positions[i].1 - positions[j].1).powi(2)).sqrt();
            if i == j {
                adjacency[i * m + j] = 1.0;
            } else if d < cfg.radius {
                adjacency[i * m + j] = (-(d / sigma).powi(2)).exp();
            }
        }
    }
    let profiles: Vec<Profile> = (0..m).map(|_| Profile::draw(&mut rng)).collect();

    let mut timestamps = Vec::with_capacity(cfg.days * STEPS_PER_DAY);
    let mut day = 0i64;
    let mut kept = 0;
    while kept < cfg.days {
        let date = start + TimeDelta::days(day);
        day += 1;
        if cfg.week_days == 5 && date.weekday().num_days_from_monday() >= 5 {
            continue;
        }
        kept += 1;
        for s in 0..STEPS_PER_DAY {
            timestamps.push(date + TimeDelta::minutes(STEP_MINUTES * s as i64));
        }
    }
    let k = timestamps.len();

    let mut periodic = vec![0.0; m * k];
    for (step, t) in timestamps.iter().enumerate() {
        let hour = (step % STEPS_PER_DAY) as f64 * STEP_MINUTES as f64 / 60.0;
        let intensity = day_intensity(t.weekday().num_days_from_monday());
        for (n, p) in profiles.iter().enumerate() {
            periodic[n * k + step] = p.speed(hour, intensity);
        }
    }

    // row-normalized transition used for residual diffusion
    let transition: Vec<f64> = (0..m)
        .flat_map(|i| {
            let row = &adjacency[i * m..(i + 1) * m];
            let total: f64 = row.iter().sum();
            row.iter().map(move |w| w / total).collect::<Vec<_>>()
        })
        .collect();
    let alpha = cfg.diffusion_strength;
    let mut residual = vec![0.0; m];
    let mut values = periodic.clone();
    for step in 0..k {
        let prev = residual.clone();
        for n in 0..m {
            let diffused: f64 = (0..m).map(|j| transition[n * m + j] * prev[j]).sum();
            let eps: f64 = StandardNormal.sample(&mut rng);
            residual[n] = profiles[n].ar_coef * ((1.0 - alpha) * prev[n] + alpha * diffused)
                + profiles[n].residual_scale * cfg.noise_std * eps;
        }
        for n in 0..m {
            let obs: f64 = StandardNormal.sample(&mut rng);
            let v = periodic[n * k + step] + residual[n] + 0.25 * cfg.noise_std * obs;
            values[n * k + step] = if cfg.noise_std > 0.0 { v.max(1.0) } else { v };
        }
    }

    let mut observed = vec![true; m * k];
    if cfg.missing_rate > 0.0 {
        for o in observed.iter_mut() {
            if rng.random::<f64>() < cfg.missing_rate {
                *o = false;
            }
        }
    }
    let ids = (0..m).map(|i| format!("s{i:03}")).collect();
    let dataset = TrafficDataset::new(ids, timestamps, values, observed, adjacency)?;
    Ok(SyntheticData { dataset, periodic })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig { sensors: 20, days: 14, seed: 0, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate_synthetic(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn degenerate_generator_returns_profile() {
        let cfg = SynthConfig { noise_std: 0.0, diffusion_strength: 0.0, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        let k = s.dataset.num_steps();
        for n in 0..s.dataset.num_sensors() {
            assert_eq!(s.dataset.row(n), &s.periodic[n * k..(n + 1) * k]);
        }
    }

    #[test]
    fn default_mean_in_plausible_band() {
        // base ∈ [55, 65] minus two gaussian dips averaging at most ~4 mph
        // over a day keeps the mean inside [40, 70]
        let s = generate_synthetic(&SynthConfig::default()).unwrap();
        let mean = s.dataset.observed_mean();
        assert!((40.0..=70.0).contains(&mean), "{mean}");
        let max_dip_mean = (25.0 * 1.25 + 20.0 * 1.5) * (2.0 * std::f64::consts::PI).sqrt() / 24.0 * 1.15;
        assert!(mean > 55.0 - max_dip_mean - 1.0);
    }

    #[test]
    fn weekday_only_layout() {
        let cfg = SynthConfig { week_days: 5, days: 6, ..Default::default() };
        let s = generate_synthetic(&cfg).unwrap();
        assert_eq!(s.dataset.num_steps(), 6 * STEPS_PER_DAY);
        assert!(s.dataset.timestamps().iter().all(|t| t.weekday().num_days_from_monday() < 5));
        assert_eq!(cfg.week_period(), 1440);
    }

    #[test]
    fn adjacency_has_unit_diagonal_and_bounded_weights() {
        let s = generate_synthetic(&SynthConfig::default()).unwrap();
        let m = s.dataset.num_sensors();
        for i in 0..m {
            assert_eq!(s.dataset.weight(i, i), 1.0);
        }
        assert!(s.dataset.adjacency().iter().all(|w| (0.0..=1.0).contains(w)));
    }

    #[test]
    fn rejects_tiny_configs() {
        assert!(generate_synthetic(&SynthConfig { sensors: 3, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SynthConfig { days: 3, ..Default::default() }).is_err());
    }
}
