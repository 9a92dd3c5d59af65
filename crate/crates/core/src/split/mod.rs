//! Nine-cell spatio-temporal split.
//!
//! Roads are shuffled into train/val/test partitions and time is cut at
//! `t1 < t2` into past/validation/test periods. Each (road partition, period)
//! pair is one labelled cell:
//!
//! |            | past `[0,t1)` | val `[t1,t2)` | test `[t2,K)` |
//! |------------|---------------|---------------|---------------|
//! | train roads| A             | B             | C             |
//! | val roads  | D             | E             | F             |
//! | test roads | G             | H             | I             |

mod protocol;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrafficDataset;
use crate::error::{Error, Result};

pub use protocol::{AccessRecord, Protocol, Purpose};

pub const SPLIT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
}

impl Label {
    pub const ALL: [Label; 9] =
        [Label::A, Label::B, Label::C, Label::D, Label::E, Label::F, Label::G, Label::H, Label::I];

    pub fn roads(self) -> RoadPartition {
        match self {
            Label::A | Label::B | Label::C => RoadPartition::Train,
            Label::D | Label::E | Label::F => RoadPartition::Val,
            Label::G | Label::H | Label::I => RoadPartition::Test,
        }
    }

    pub fn period(self) -> Period {
        match self {
            Label::A | Label::D | Label::G => Period::Past,
            Label::B | Label::E | Label::H => Period::Val,
            Label::C | Label::F | Label::I => Period::Test,
        }
    }

    pub fn of(roads: RoadPartition, period: Period) -> Label {
        Label::ALL[roads as usize * 3 + period as usize]
    }

    pub fn parse(s: &str) -> Option<Label> {
        Label::ALL.into_iter().find(|l| l.to_string() == s)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoadPartition {
    Train = 0,
    Val = 1,
    Test = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Period {
    Past = 0,
    Val = 1,
    Test = 2,
}

/// Seeded road partition and temporal boundaries. Serialized as `split.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_sensors: Vec<String>,
    pub val_sensors: Vec<String>,
    pub test_sensors: Vec<String>,
    pub t1: usize,
    pub t2: usize,
    pub version: u32,
}

/// `floor(ratio · n)` robust to the ratio sum landing a hair under an integer.
fn floor_share(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

fn check_ratios(name: &str, r: [f64; 3]) -> Result<()> {
    if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{name} ratios {r:?} must be positive and sum to 1")));
    }
    Ok(())
}

/// Cut points `(floor(r0·n), floor((r0+r1)·n))`.
pub fn boundaries(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    (floor_share(ratios[0], n), floor_share(ratios[0] + ratios[1], n))
}

/// Draws the split: uniform seeded shuffle of roads then contiguous slicing,
/// and non-random temporal boundaries, both with the floor/floor/remainder rule.
pub fn make_split(
    sensor_ids: &[String],
    num_steps: usize,
    spatial_ratios: [f64; 3],
    temporal_ratios: [f64; 3],
    seed: u64,
) -> Result<SplitManifest> {
    check_ratios("spatial", spatial_ratios)?;
    check_ratios("temporal", temporal_ratios)?;
    let m = sensor_ids.len();
    let (s1, s2) = boundaries(m, spatial_ratios);
    if s1 == 0 || s2 == s1 || s2 == m {
        return Err(Error::invalid(format!(
            "{m} sensors leave an empty road partition under ratios {spatial_ratios:?}"
        )));
    }
    let (t1, t2) = boundaries(num_steps, temporal_ratios);
    if t1 == 0 || t2 == t1 || t2 >= num_steps {
        return Err(Error::invalid(format!(
            "{num_steps} timesteps leave an empty period under ratios {temporal_ratios:?}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: Range<usize>| -> Vec<String> {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| sensor_ids[i].clone()).collect()
    };
    Ok(SplitManifest {
        seed,
        train_sensors: pick(0..s1),
        val_sensors: pick(s1..s2),
        test_sensors: pick(s2..m),
        t1,
        t2,
        version: SPLIT_VERSION,
    })
}

impl SplitManifest {
    pub fn sensors(&self, part: RoadPartition) -> &[String] {
        match part {
            RoadPartition::Train => &self.train_sensors,
            RoadPartition::Val => &self.val_sensors,
            RoadPartition::Test => &self.test_sensors,
        }
    }

    pub fn period(&self, period: Period, num_steps: usize) -> Range<usize> {
        match period {
            Period::Past => 0..self.t1,
            Period::Val => self.t1..self.t2,
            Period::Test => self.t2..num_steps,
        }
    }

    /// Checks the manifest against a dataset: disjoint, complete partitions
    /// of known ids and `0 < t1 < t2 < K`.
    pub fn validate(&self, ds: &TrafficDataset) -> Result<()> {
        if self.version != SPLIT_VERSION {
            return Err(Error::invalid(format!("unsupported split version {}", self.version)));
        }
        let k = ds.num_steps();
        if !(0 < self.t1 && self.t1 < self.t2 && self.t2 < k) {
            return Err(Error::invalid(format!(
                "split boundaries t1={} t2={} invalid for {k} timesteps",
                self.t1, self.t2
            )));
        }
        let mut seen = BTreeSet::new();
        for part in [RoadPartition::Train, RoadPartition::Val, RoadPartition::Test] {
            if self.sensors(part).is_empty() {
                return Err(Error::invalid(format!("{part:?} road partition is empty")));
            }
            for id in self.sensors(part) {
                if ds.sensor_index(id).is_none() {
                    return Err(Error::invalid(format!("split names unknown sensor {id:?}")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::invalid(format!("sensor {id:?} appears in two partitions")));
                }
            }
        }
        if seen.len() != ds.num_sensors() {
            return Err(Error::invalid("split does not cover every sensor"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SplitManifest = serde_json::from_str(&text)?;
        if m.version != SPLIT_VERSION {
            return Err(Error::invalid(format!("unsupported split version {}", m.version)));
        }
        Ok(m)
    }
}

/// Read-only rectangle of a dataset: selected sensors × contiguous steps.
#[derive(Clone, Debug)]
pub struct DatasetView<'a> {
    ds: &'a TrafficDataset,
    pub labels: BTreeSet<Label>,
    /// Dataset row indices, in partition order.
    pub sensors: Vec<usize>,
    pub steps: Range<usize>,
    /// Induced adjacency over `sensors`.
    pub adjacency: Vec<f64>,
}

impl<'a> DatasetView<'a> {
    pub fn dataset(&self) -> &'a TrafficDataset {
        self.ds
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        self.sensors.iter().map(|&s| self.ds.sensor_ids()[s].clone()).collect()
    }

    /// Values of the `i`-th selected sensor over the view's steps.
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.ds.row(self.sensors[i])[self.steps.clone()]
    }

    pub fn observed_row(&self, i: usize) -> &'a [bool] {
        &self.ds.observed_row(self.sensors[i])[self.steps.clone()]
    }

    /// Drops physical edges between distinct sensors, keeping self-loops.
    pub fn without_edges(mut self) -> Self {
        let n = self.sensors.len();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    self.adjacency[i * n + j] = 0.0;
                }
            }
        }
        self
    }
}

fn sensor_rows(ds: &TrafficDataset, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter().map(|id| ds.sensor_index(id).ok_or_else(|| Error::invalid(format!("unknown sensor {id:?}")))).collect()
}

/// The cell for one label.
pub fn subset<'a>(ds: &'a TrafficDataset, manifest: &SplitManifest, label: Label) -> Result<DatasetView<'a>> {
    subset_union(ds, manifest, &[label])
}

/// Union of labelled cells; the union must itself be a rectangle of road
/// partitions × contiguous periods, e.g. `G ∪ H` or `A ∪ B ∪ D ∪ E`.
pub fn subset_union<'a>(ds: &'a TrafficDataset, manifest: &SplitManifest, labels: &[Label]) -> Result<DatasetView<'a>> {
    if labels.is_empty() {
        return Err(Error::invalid("empty label set"));
    }
    if manifest.t2 >= ds.num_steps() {
        return Err(Error::invalid("split boundaries exceed dataset length"));
    }
    let set: BTreeSet<Label> = labels.iter().copied().collect();
    let parts: BTreeSet<RoadPartition> = set.iter().map(|l| l.roads()).collect();
    let periods: BTreeSet<Period> = set.iter().map(|l| l.period()).collect();
    let rectangular = parts.len() * periods.len() == set.len()
        && periods.iter().zip(periods.iter().skip(1)).all(|(a, b)| *b as usize == *a as usize + 1);
    if !rectangular {
        let names: Vec<String> = set.iter().map(Label::to_string).collect();
        return Err(Error::invalid(format!("labels {} do not form a rectangle", names.join("∪"))));
    }
    let k = ds.num_steps();
    let first = manifest.period(*periods.first().unwrap(), k);
    let last = manifest.period(*periods.last().unwrap(), k);
    let mut sensors = Vec::new();
    for part in &parts {
        sensors.extend(sensor_rows(ds, manifest.sensors(*part))?);
    }
    let adjacency = ds.sub_adjacency(&sensors);
    Ok(DatasetView { ds, labels: set, sensors, steps: first.start..last.end, adjacency })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn ids(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("s{i}")).collect()
    }

    const RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

    #[test]
    fn ten_sensors_split_seven_one_two() {
        let s = make_split(&ids(10), 100, RATIOS, RATIOS, 0).unwrap();
        assert_eq!((s.train_sensors.len(), s.val_sensors.len(), s.test_sensors.len()), (7, 1, 2));
        assert_eq!((s.t1, s.t2), (70, 80));
    }

    #[test]
    fn metr_la_length_boundaries() {
        let s = make_split(&ids(10), 34272, RATIOS, RATIOS, 0).unwrap();
        assert_eq!((s.t1, s.t2), (23990, 27417));
    }

    #[test]
    fn seeded_partitions() {
        let a = make_split(&ids(20), 100, RATIOS, RATIOS, 3).unwrap();
        assert_eq!(a, make_split(&ids(20), 100, RATIOS, RATIOS, 3).unwrap());
        let b = make_split(&ids(20), 100, RATIOS, RATIOS, 4).unwrap();
        assert_ne!(a.train_sensors, b.train_sensors);
    }

    #[test]
    fn empty_partitions_rejected() {
        assert!(make_split(&ids(3), 100, RATIOS, RATIOS, 0).is_err());
        assert!(make_split(&ids(10), 3, RATIOS, RATIOS, 0).is_err());
        assert!(make_split(&ids(10), 100, [0.5, 0.5, 0.0], RATIOS, 0).is_err());
        assert!(make_split(&ids(10), 100, [0.5, 0.4, 0.2], RATIOS, 0).is_err());
    }

    #[test]
    fn label_grid_layout() {
        assert_eq!(Label::A.roads(), RoadPartition::Train);
        assert_eq!(Label::A.period(), Period::Past);
        assert_eq!(Label::E, Label::of(RoadPartition::Val, Period::Val));
        assert_eq!(Label::I, Label::of(RoadPartition::Test, Period::Test));
        assert_eq!(Label::D, Label::of(RoadPartition::Val, Period::Past));
        assert_eq!(Label::G, Label::of(RoadPartition::Test, Period::Past));
        assert_eq!(Label::parse("H"), Some(Label::H));
    }

    #[test]
    fn cells_tile_the_grid() {
        let data = generate_synthetic(&SynthConfig { sensors: 10, days: 4, ..Default::default() }).unwrap();
        let ds = &data.dataset;
        let s = make_split(ds.sensor_ids(), ds.num_steps(), RATIOS, RATIOS, 1).unwrap();
        let mut hits = vec![0u8; ds.num_sensors() * ds.num_steps()];
        for label in Label::ALL {
            let v = subset(ds, &s, label).unwrap();
            for &r in &v.sensors {
                for k in v.steps.clone() {
                    hits[r * ds.num_steps() + k] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn unions_and_rectangles() {
        let data = generate_synthetic(&SynthConfig { sensors: 10, days: 4, ..Default::default() }).unwrap();
        let ds = &data.dataset;
        let s = make_split(ds.sensor_ids(), ds.num_steps(), RATIOS, RATIOS, 1).unwrap();
        let a = subset(ds, &s, Label::A).unwrap();
        assert_eq!(a.steps, 0..s.t1);
        assert_eq!(a.sensor_ids(), s.train_sensors);
        let gh = subset_union(ds, &s, &[Label::G, Label::H]).unwrap();
        assert_eq!(gh.steps, 0..s.t2);
        assert_eq!(gh.sensor_ids(), s.test_sensors);
        let abde = subset_union(ds, &s, &[Label::A, Label::B, Label::D, Label::E]).unwrap();
        assert_eq!(abde.num_sensors(), 8);
        assert!(subset_union(ds, &s, &[Label::A, Label::E]).is_err());
        assert!(subset_union(ds, &s, &[Label::A, Label::C]).is_err());
    }

    #[test]
    fn induced_adjacency_and_edge_ablation() {
        let data =
            generate_synthetic(&SynthConfig { sensors: 10, days: 4, radius: 2.0, ..Default::default() }).unwrap();
        let ds = &data.dataset;
        let s = make_split(ds.sensor_ids(), ds.num_steps(), RATIOS, RATIOS, 1).unwrap();
        let v = subset(ds, &s, Label::I).unwrap();
        let (a, b) = (v.sensors[0], v.sensors[1]);
        assert_eq!(v.adjacency[1], ds.weight(a, b));
        assert!(v.adjacency[1] > 0.0);
        let bare = v.without_edges();
        assert_eq!(bare.adjacency, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&SynthConfig { sensors: 10, days: 4, ..Default::default() }).unwrap();
        let ds = &data.dataset;
        let s = make_split(ds.sensor_ids(), ds.num_steps(), RATIOS, RATIOS, 9).unwrap();
        let p = dir.path().join("split.json");
        s.save(&p).unwrap();
        let back = SplitManifest::load(&p).unwrap();
        assert_eq!(back, s);
        back.validate(ds).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        for key in ["seed", "train_sensors", "val_sensors", "test_sensors", "t1", "t2", "version"] {
            assert!(text.contains(&format!("\"{key}\"")));
        }
        let mut bad = s.clone();
        bad.test_sensors.push(bad.train_sensors[0].clone());
        assert!(bad.validate(ds).is_err());
    }
}
