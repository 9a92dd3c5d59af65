//! Contrastive pre-training of the spatial encoder.
//!
//! Each step samples `N` training roads, encodes two stochastic views of
//! each, projects them with a linear head and minimizes NT-Xent over the
//! `2N` views, where views `i` and `i + N` are the positive pair.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, TensorError, Var};
use crate::decouple::PeriodicModel;
use crate::encoder::{road_seed, BnMode, Encoder, DEFAULT_DIM, MIN_HISTORY};
use crate::error::{Error, Result};
use crate::nn::{linear, Adam, AdamConfig, Bound, Init, ParamSet};
use crate::prep::{prepare_view, Prepared, Scalers};
use crate::split::{Label, Protocol, Purpose};

pub const PRETRAIN_LOG: &str = "pretrain_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub temperature: f64,
    /// Roads per step; `None` means `min(32, train roads)`.
    pub batch_roads: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dim: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            temperature: 50.0,
            batch_roads: None,
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            dim: DEFAULT_DIM,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch_roads.is_some_and(|n| n < 2) {
            return Err(Error::Config("batch_roads must be at least 2; NT-Xent needs a negative".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || self.dim == 0 {
            return Err(Error::Config("lr > 0, weight_decay ≥ 0 and dim > 0 required".into()));
        }
        Ok(())
    }

    fn roads_per_step(&self, available: usize) -> usize {
        self.batch_roads.unwrap_or(32).min(available)
    }
}

/// Linear projection head `z = e·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub params: ParamSet,
}

impl ProjectionHead {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        Init::new(seed).linear(&mut params, "proj", dim, dim);
        Self { params }
    }

    pub fn identity(dim: usize) -> Self {
        let mut params = ParamSet::new();
        params.insert("proj.weight", Tensor::identity(dim));
        params.insert("proj.bias", Tensor::zeros(&[dim]));
        Self { params }
    }

    pub fn project(&self, tape: &mut Tape, p: &Bound, e: Var) -> Result<Var> {
        linear(tape, p, "proj", e)
    }
}

/// NT-Xent over `z: [2N, D]` with cosine similarity and temperature `tau`.
pub fn nt_xent(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 2 || s[0] % 2 != 0 || s[0] < 4 {
        return Err(Error::invalid(format!("NT-Xent needs [2N, D] views with N ≥ 2, got {s:?}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let rows = s[0];
    let n = rows / 2;
    let zn = tape.l2_normalize(z)?;
    let zt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, zt)?;
    let logits = tape.affine(sim, 1.0 / tau, 0.0)?;
    let targets: Vec<usize> = (0..rows).map(|a| (a + n) % rows).collect();
    let exclude: Vec<Option<usize>> = (0..rows).map(Some).collect();
    Ok(tape.cross_entropy(logits, &targets, &exclude)?)
}

/// One epoch of the pre-training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    pub log: Vec<PretrainRecord>,
}

pub(crate) fn seed_mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x51_7cc1_b727_220a_u64, |acc, &p| road_seed(acc ^ p, "mix"))
}

fn nonfinite(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { stage: "pretrain", epoch, step },
        other => other,
    }
}

/// Contrastive loss of one batch of roads; returns the tape, loss and pass.
fn batch_loss(
    encoder: &Encoder,
    head: &ProjectionHead,
    series: &[&[f64]],
    view_seeds: [Vec<u64>; 2],
    tau: f64,
    trainable: bool,
) -> Result<(Tape, Var, Bound, Bound, crate::encoder::EncoderPass)> {
    let mut tape = Tape::new();
    let pe = encoder.params.bind(&mut tape, trainable)?;
    let ph = head.params.bind(&mut tape, trainable)?;
    let len = series[0].len();
    let data = series.iter().flat_map(|s| s.iter().copied()).collect();
    let x = tape.constant(Tensor::new(vec![series.len(), len, 1], data)?)?;
    let pass = encoder.forward_views(&mut tape, &pe, x, &view_seeds, BnMode::Train)?;
    let z = head.project(&mut tape, &ph, pass.embedding)?;
    let loss = nt_xent(&mut tape, z, tau)?;
    Ok((tape, loss, pe, ph, pass))
}

/// Splits `order` into batches of `size`, folding a trailing single road
/// into the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn view_seeds(base: u64, ids: &[&str]) -> [Vec<u64>; 2] {
    [0u64, 1].map(|v| ids.iter().map(|id| road_seed(seed_mix(&[base, v]), id)).collect())
}

/// Mean contrastive loss over `A ∪ B ∪ D ∪ E` with fixed view seeds and
/// batch statistics; no parameter or running-stat updates.
fn validation_loss(encoder: &Encoder, head: &ProjectionHead, prep: &Prepared, cfg: &PretrainConfig) -> Result<f64> {
    let order: Vec<usize> = (0..prep.num_roads()).collect();
    let size = cfg.roads_per_step(prep.num_roads());
    let mut total = 0.0;
    let groups = batches(&order, size);
    for group in &groups {
        let series: Vec<&[f64]> = group.iter().map(|&i| prep.encoder_series()[i].as_slice()).collect();
        let ids: Vec<&str> = group.iter().map(|&i| prep.road_ids[i].as_str()).collect();
        let seeds = view_seeds(seed_mix(&[cfg.seed, u64::MAX]), &ids);
        let (tape, loss, ..) = batch_loss(encoder, head, &series, seeds, cfg.temperature, false)?;
        total += tape.value(loss).item();
    }
    Ok(total / groups.len() as f64)
}

/// Pre-trains a fresh encoder on set A.
///
/// Training batches read only set A; the per-epoch validation loss reads
/// exactly `A ∪ B ∪ D ∪ E`. With a periodic model the encoder sees scaled
/// residuals, otherwise scaled raw speeds.
pub fn pretrain(
    protocol: &Protocol,
    scalers: &Scalers,
    periodic: Option<&PeriodicModel>,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let train_view = protocol.view(Purpose::PretrainStep, &[Label::A])?;
    if train_view.len() < MIN_HISTORY {
        return Err(Error::invalid(format!(
            "set A spans {} steps; the encoder needs at least {MIN_HISTORY}",
            train_view.len()
        )));
    }
    if train_view.num_sensors() < 2 {
        return Err(Error::invalid("pre-training needs at least two training roads"));
    }
    let train = prepare_view(&train_view, scalers, periodic)?;
    let val_view = protocol.view(Purpose::PretrainValidation, &[Label::A, Label::B, Label::D, Label::E])?;
    let val = prepare_view(&val_view, scalers, periodic)?;

    let mut encoder = Encoder::new(cfg.dim, seed_mix(&[cfg.seed, 1]))?;
    let mut head = ProjectionHead::new(cfg.dim, seed_mix(&[cfg.seed, 2]));
    let mut enc_opt = Adam::new(AdamConfig::new(cfg.lr, cfg.weight_decay));
    let mut head_opt = Adam::new(AdamConfig::new(cfg.lr, cfg.weight_decay));
    let size = cfg.roads_per_step(train.num_roads());
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.num_roads()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_mix(&[cfg.seed, 3, epoch as u64])));
        let mut total = 0.0;
        let groups = batches(&order, size);
        for (step, group) in groups.iter().enumerate() {
            let series: Vec<&[f64]> = group.iter().map(|&i| train.encoder_series()[i].as_slice()).collect();
            let ids: Vec<&str> = group.iter().map(|&i| train.road_ids[i].as_str()).collect();
            let seeds = view_seeds(seed_mix(&[cfg.seed, 4, epoch as u64, step as u64]), &ids);
            let (mut tape, loss, pe, ph, pass) = batch_loss(&encoder, &head, &series, seeds, cfg.temperature, true)
                .map_err(|e| nonfinite(e, epoch, step))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { stage: "pretrain", epoch, step });
            }
            total += value;
            let mut grads = tape.backward_scalar(loss).map_err(|e| nonfinite(e.into(), epoch, step))?;
            enc_opt.step(&mut encoder.params, &pe.collect(&mut grads))?;
            head_opt.step(&mut head.params, &ph.collect(&mut grads))?;
            encoder.absorb_stats(&tape, &pass);
        }
        let val_loss = validation_loss(&encoder, &head, &val, cfg).map_err(|e| nonfinite(e, epoch, groups.len()))?;
        log.push(PretrainRecord { epoch, train_loss: total / groups.len() as f64, val_loss });
    }
    Ok(PretrainOutcome { encoder, log })
}

pub fn write_pretrain_log(path: &Path, log: &[PretrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in log {
        w.serialize(r).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pretrain_log(path: &Path) -> Result<Vec<PretrainRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}
