//! Stochastic spatial encoder.
//!
//! A road's history `[K']` passes through three channels-last convolutions
//! with (window, stride) = (13,1), (12,12), (24,24), the last one emitting
//! one column per day. Half of the day columns are sampled at random, then
//! mean/std/max pooled, concatenated and mapped to a `D`-wide embedding:
//!
//! ```text
//! e1 = BN1(ReLU(conv1(x)))      e2 = BN2(ReLU(conv2(e1)))      e3 = conv3(e2)
//! e  = BN4(ReLU(FC(BN3(mean(e4) ++ std(e4) ++ max(e4)))))      e4 ⊂ days of e3
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::autograd::{conv_output_len, NormMode, PoolKind, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{linear, Bound, Init, ParamSet, RunningStats};

/// (window, stride) of the three convolutions.
pub const CONV_LAYERS: [(usize, usize); 3] = [(13, 1), (12, 12), (24, 24)];
/// Shortest accepted history, in timesteps.
pub const MIN_HISTORY: usize = 589;
pub const DEFAULT_DIM: usize = 32;
pub const ENCODER_KIND: &str = "encoder";

const NORMS: [&str; 4] = ["bn1", "bn2", "bn3", "bn4"];

/// Number of day columns `K3` for a history of `k` steps.
pub fn feature_len(k: usize) -> Result<usize> {
    let too_short = || {
        Error::invalid(format!("history of {k} steps is too short for the encoder; at least {MIN_HISTORY} required"))
    };
    if k < MIN_HISTORY {
        return Err(too_short());
    }
    CONV_LAYERS.iter().try_fold(k, |len, &(w, s)| conv_output_len(len, w, s, 1)).ok_or_else(too_short)
}

/// `max(1, floor(k3 / 2))` day indices drawn without replacement, sorted.
pub fn sample_days(k3: usize, seed: u64) -> Vec<usize> {
    let k4 = (k3 / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, k3, k4).into_vec();
    idx.sort_unstable();
    idx
}

/// Stable per-road sampling seed, independent of batch order.
pub fn road_seed(base: u64, road_id: &str) -> u64 {
    // FNV-1a over the id, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in road_id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Whether batch norm uses batch statistics (pre-training) or frozen ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Tape handles of one encoder pass.
pub struct EncoderPass {
    /// `[R, D]` embeddings.
    pub embedding: Var,
    norms: Vec<(&'static str, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub dim: usize,
    pub params: ParamSet,
    pub running: BTreeMap<String, RunningStats>,
}

impl Encoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("encoder dimension must be positive".into()));
        }
        let mut init = Init::new(seed);
        let mut params = ParamSet::new();
        init.conv(&mut params, "conv1", CONV_LAYERS[0].0, 1, dim);
        init.norm(&mut params, "bn1", dim);
        init.conv(&mut params, "conv2", CONV_LAYERS[1].0, dim, dim);
        init.norm(&mut params, "bn2", dim);
        init.conv(&mut params, "conv3", CONV_LAYERS[2].0, dim, dim);
        init.norm(&mut params, "bn3", 3 * dim);
        init.linear(&mut params, "fc", 3 * dim, dim);
        init.norm(&mut params, "bn4", dim);
        let running =
            NORMS.iter().map(|&n| (n.to_string(), RunningStats::new(if n == "bn3" { 3 * dim } else { dim }))).collect();
        Ok(Self { dim, params, running })
    }

    fn norm(
        &self,
        tape: &mut Tape,
        p: &Bound,
        name: &'static str,
        x: Var,
        mode: BnMode,
        log: &mut Vec<(&'static str, Var)>,
    ) -> Result<Var> {
        let nm = match mode {
            BnMode::Train => NormMode::Batch,
            BnMode::Eval => self.running[name].mode(),
        };
        let y = tape.batch_norm(x, p.var(&format!("{name}.gamma")), p.var(&format!("{name}.beta")), &nm)?;
        log.push((name, y));
        Ok(y)
    }

    /// `e3`: `[R, K', 1]` histories to `[R, K3, D]` day features.
    pub fn extract_features(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mode: BnMode,
        log: &mut Vec<(&'static str, Var)>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != 1 {
            return Err(Error::invalid(format!("encoder input must be [roads, steps, 1], got {s:?}")));
        }
        feature_len(s[1])?;
        let conv = |tape: &mut Tape, x, i: usize| -> Result<Var> {
            let name = format!("conv{}", i + 1);
            Ok(tape.conv1d(
                x,
                p.var(&format!("{name}.weight")),
                Some(p.var(&format!("{name}.bias"))),
                CONV_LAYERS[i].1,
                1,
            )?)
        };
        let h = conv(tape, x, 0)?;
        let h = tape.relu(h)?;
        let h = self.norm(tape, p, "bn1", h, mode, log)?;
        let h = conv(tape, h, 1)?;
        let h = tape.relu(h)?;
        let h = self.norm(tape, p, "bn2", h, mode, log)?;
        conv(tape, h, 2)
    }

    /// Pools `[R, K4, D]` sampled day features into `[R, D]` embeddings.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        p: &Bound,
        e4: Var,
        mode: BnMode,
        log: &mut Vec<(&'static str, Var)>,
    ) -> Result<Var> {
        let mean = tape.pool(e4, 1, PoolKind::Mean)?;
        let std = tape.pool(e4, 1, PoolKind::Std)?;
        let max = tape.pool(e4, 1, PoolKind::Max)?;
        let moments = tape.concat(&[mean, std, max], 1)?;
        let h = self.norm(tape, p, "bn3", moments, mode, log)?;
        let h = linear(tape, p, "fc", h)?;
        let h = tape.relu(h)?;
        self.norm(tape, p, "bn4", h, mode, log)
    }

    /// Full pass over equal-length histories `[R, K', 1]`, one sampling
    /// seed per road.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, seeds: &[u64], mode: BnMode) -> Result<EncoderPass> {
        self.forward_views(tape, p, x, &[seeds.to_vec()], mode)
    }

    /// Several stochastic views of the same histories sharing one feature
    /// extraction. Output rows are view-major: row `v·R + r` is view `v` of
    /// road `r`.
    pub fn forward_views(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        view_seeds: &[Vec<u64>],
        mode: BnMode,
    ) -> Result<EncoderPass> {
        let mut norms = Vec::new();
        let e3 = self.extract_features(tape, p, x, mode, &mut norms)?;
        let s = tape.shape(e3).to_vec();
        if view_seeds.is_empty() || view_seeds.iter().any(|v| v.len() != s[0]) {
            return Err(Error::invalid(format!("each view needs one sampling seed for each of {} roads", s[0])));
        }
        let stacked = if view_seeds.len() == 1 { e3 } else { tape.concat(&vec![e3; view_seeds.len()], 0)? };
        let picks = view_seeds.iter().flatten().map(|&sd| sample_days(s[1], sd)).collect();
        let e4 = tape.gather(stacked, picks)?;
        let embedding = self.aggregate(tape, p, e4, mode, &mut norms)?;
        Ok(EncoderPass { embedding, norms })
    }

    /// Folds the batch statistics of a training-mode pass into the running stats.
    pub fn absorb_stats(&mut self, tape: &Tape, pass: &EncoderPass) {
        for &(name, v) in &pass.norms {
            if let Some((mean, var)) = tape.batch_stats(v) {
                let c = mean.len();
                let rows = tape.value(v).numel() / c;
                let (mean, var) = (mean.to_vec(), var.to_vec());
                self.running.get_mut(name).expect("known norm").update(&mean, &var, rows);
            }
        }
    }

    /// Frozen-encoder embeddings of arbitrary-length histories (each ≥ [`MIN_HISTORY`]).
    ///
    /// Roads are batched by history length; each road's result depends only
    /// on its own history and seed.
    pub fn embed(&self, histories: &[&[f64]], seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        if histories.len() != seeds.len() {
            return Err(Error::invalid("one sampling seed per history required"));
        }
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, h) in histories.iter().enumerate() {
            feature_len(h.len())?;
            by_len.entry(h.len()).or_default().push(i);
        }
        let mut out = vec![Vec::new(); histories.len()];
        for (len, members) in by_len {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false)?;
            let data = members.iter().flat_map(|&i| histories[i].iter().copied()).collect();
            let x = tape.constant(Tensor::new(vec![members.len(), len, 1], data)?)?;
            let group_seeds: Vec<u64> = members.iter().map(|&i| seeds[i]).collect();
            let pass = self.forward(&mut tape, &p, x, &group_seeds, BnMode::Eval)?;
            let e = tape.value(pass.embedding).data();
            for (row, &i) in members.iter().enumerate() {
                out[i] = e[row * self.dim..(row + 1) * self.dim].to_vec();
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut buffers = ParamSet::new();
        for (name, rs) in &self.running {
            let c = rs.mean.len();
            buffers.insert(format!("{name}.running_mean"), Tensor::new(vec![c], rs.mean.clone()).expect("c > 0"));
            buffers.insert(format!("{name}.running_var"), Tensor::new(vec![c], rs.var.clone()).expect("c > 0"));
        }
        Checkpoint::new(ENCODER_KIND, self.params.clone(), buffers, json!({ "dim": self.dim }))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let dim = ck
            .meta
            .get("dim")
            .and_then(|d| d.as_u64())
            .ok_or_else(|| Error::invalid("encoder checkpoint lacks its dimension"))? as usize;
        let template = Self::new(dim, 0)?;
        for (name, t) in template.params.iter() {
            let got = ck.params.get(name).ok_or_else(|| Error::invalid(format!("encoder checkpoint lacks {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::invalid(format!("encoder parameter {name} has shape {:?}", got.shape())));
            }
        }
        let mut running = BTreeMap::new();
        for (name, rs) in &template.running {
            let get = |suffix: &str| -> Result<Vec<f64>> {
                let key = format!("{name}.{suffix}");
                let t =
                    ck.buffers.get(&key).ok_or_else(|| Error::invalid(format!("encoder checkpoint lacks {key}")))?;
                if t.numel() != rs.mean.len() {
                    return Err(Error::invalid(format!("buffer {key} has {} values", t.numel())));
                }
                Ok(t.data().to_vec())
            };
            running.insert(name.clone(), RunningStats { mean: get("running_mean")?, var: get("running_var")? });
        }
        Ok(Self { dim, params: ck.params.clone(), running })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?.expect_kind(ENCODER_KIND, dir)?)
    }
}
