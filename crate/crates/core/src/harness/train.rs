//! Supervised training on set A with a frozen encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::metrics;
use super::model::{embed_roads, Forecaster};
use crate::autograd::TensorError;
use crate::backbone::{BackboneConfig, Flags, Supports};
use crate::contrastive::seed_mix;
use crate::data::window_iter;
use crate::decouple::PeriodicModel;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::prep::{fit_scalers, prepare_view};
use crate::split::{Label, Protocol, Purpose};

pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Windows per step; every window covers all training roads.
    pub batch_size: usize,
    /// Caps the optimizer steps per epoch; `None` sweeps every window.
    pub max_batches_per_epoch: Option<usize>,
    pub model_seed: u64,
    pub flags: Flags,
    pub backbone: BackboneConfig,
    /// Sampling seed for validation and evaluation embeddings.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            max_batches_per_epoch: None,
            model_seed: 0,
            flags: Flags::ALL_ON,
            backbone: BackboneConfig::default(),
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.max_batches_per_epoch == Some(0) {
            return Err(Error::Config("epochs, batch_size and max_batches_per_epoch must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate > 0 and weight_decay ≥ 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_MAE")]
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Forecaster,
    pub log: Vec<TrainRecord>,
}

fn nonfinite(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { stage: "train", epoch, step },
        other => other,
    }
}

/// Checks that the encoder and periodic model match the flags; returns the
/// periodic model to use.
pub(crate) fn resolve_inputs<'m>(
    flags: Flags,
    encoder: Option<&Encoder>,
    periodic: Option<&'m PeriodicModel>,
) -> Result<Option<&'m PeriodicModel>> {
    if flags.needs_embeddings() && encoder.is_none() {
        return Err(Error::invalid("SGA or the adaptive adjacency needs a pre-trained encoder"));
    }
    if flags.decoupling {
        periodic.map(Some).ok_or_else(|| Error::invalid("decoupling needs a fitted periodic model"))
    } else {
        Ok(None)
    }
}

/// Trains a fresh forecaster on set A, validating on set E with encoder
/// inputs from set D.
///
/// Training embeddings are resampled once per epoch; validation embeddings
/// use the fixed `eval_seed`.
pub fn train(
    protocol: &Protocol,
    encoder: Option<&Encoder>,
    periodic: Option<&PeriodicModel>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let flags = cfg.flags;
    let periodic = resolve_inputs(flags, encoder, periodic)?;
    let encoder = encoder.filter(|_| flags.needs_embeddings());
    let scalers = fit_scalers(protocol, periodic)?;
    let embed_dim = encoder.map_or(cfg.backbone.hidden, |e| e.dim);
    let mut model = Forecaster::new(cfg.backbone.clone(), flags, embed_dim, cfg.model_seed, scalers)?;

    let a_view = protocol.view(Purpose::TrainStep, &[Label::A])?;
    let train_set = prepare_view(&a_view, &scalers, periodic)?;
    let train_supports = Supports::from_adjacency(&a_view.adjacency, a_view.num_sensors())?;
    let source = train_set.window_source();

    let e_view = protocol.view(Purpose::TrainValidation, &[Label::E])?;
    let val_set = prepare_view(&e_view, &scalers, periodic)?;
    let val_supports = Supports::from_adjacency(&e_view.adjacency, e_view.num_sensors())?;
    let val_embeddings = match encoder {
        Some(enc) => {
            let d_view = protocol.view(Purpose::TrainValidation, &[Label::D])?;
            Some(embed_roads(enc, &prepare_view(&d_view, &scalers, periodic)?, cfg.eval_seed, None)?)
        }
        None => None,
    };
    let val_values: Vec<&[f64]> = (0..e_view.num_sensors()).map(|i| e_view.row(i)).collect();
    let val_observed: Vec<&[bool]> = (0..e_view.num_sensors()).map(|i| e_view.observed_row(i)).collect();

    let (l, f) = (cfg.backbone.input_len, cfg.backbone.horizon);
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate, cfg.weight_decay));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let embeddings = match encoder {
            Some(enc) => Some(embed_roads(enc, &train_set, seed_mix(&[cfg.model_seed, 10, epoch as u64]), None)?),
            None => None,
        };
        let batches = window_iter(&source, l, f, cfg.batch_size, Some(seed_mix(&[cfg.model_seed, 11, epoch as u64])))?;
        let limit = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
        let (mut total, mut steps) = (0.0, 0usize);
        for (step, batch) in batches.take(limit).enumerate() {
            if !batch.target_mask.iter().any(|&m| m) {
                continue;
            }
            let mut tape = crate::autograd::Tape::new();
            let p = model.backbone.params.bind(&mut tape, true)?;
            let x = tape.constant(batch.inputs)?;
            let e = match &embeddings {
                Some(t) => Some(tape.constant(t.clone())?),
                None => None,
            };
            let run = |tape: &mut crate::autograd::Tape| -> Result<_> {
                let y = model.backbone.forward(tape, &p, x, &train_supports, e)?;
                Ok(tape.masked_mae(y, &batch.targets, &batch.target_mask)?)
            };
            let loss = run(&mut tape).map_err(|err| nonfinite(err, epoch, step))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { stage: "train", epoch, step });
            }
            let mut grads = tape.backward_scalar(loss).map_err(|err| nonfinite(err.into(), epoch, step))?;
            opt.step(&mut model.backbone.params, &p.collect(&mut grads))?;
            total += value;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::invalid("set A has no window with an observed target"));
        }
        let fc = model.forecast_windows(&val_set, &val_supports, val_embeddings.as_ref(), periodic, 64)?;
        let (truth, mask) = fc.truth(&val_values, &val_observed, e_view.steps.start)?;
        let val_mae = metrics(&fc.pred, &truth, &mask)?.mae;
        log.push(TrainRecord { epoch, train_loss: total / steps as f64, val_mae });
    }
    Ok(TrainOutcome { model, log })
}

pub fn write_train_log(path: &Path, log: &[TrainRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in log {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}
