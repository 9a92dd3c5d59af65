//! A trained backbone bundled with its scalers, plus batched inference.

use std::path::Path;

use serde_json::json;

use crate::autograd::Tensor;
use crate::backbone::{Backbone, BackboneConfig, Flags, Supports};
use crate::checkpoint::Checkpoint;
use crate::data::window_iter;
use crate::decouple::PeriodicModel;
use crate::encoder::{road_seed, Encoder};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::prep::{Prepared, Scalers};

pub const FORECASTER_KIND: &str = "forecaster";

#[derive(Clone, Debug, PartialEq)]
pub struct Forecaster {
    pub backbone: Backbone,
    pub scalers: Scalers,
}

/// Forecasts in mph for a set of windows; `pred` is `[W, N, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecasts {
    pub road_ids: Vec<String>,
    /// Absolute step of each window's first input.
    pub window_starts: Vec<usize>,
    pub input_len: usize,
    pub pred: Tensor,
}

impl Forecasts {
    /// Absolute step forecast at horizon index `h` of window `w`.
    pub fn target_step(&self, w: usize, h: usize) -> usize {
        self.window_starts[w] + self.input_len + h
    }

    pub fn horizon(&self) -> usize {
        self.pred.shape()[2]
    }

    /// Ground truth and score mask aligned with `pred`, from raw per-road series
    /// starting at absolute step `start`.
    pub fn truth(&self, values: &[&[f64]], observed: &[&[bool]], start: usize) -> Result<(Tensor, Vec<bool>)> {
        let (w, n, f) = (self.window_starts.len(), self.road_ids.len(), self.horizon());
        if values.len() != n || observed.len() != n {
            return Err(Error::invalid("one truth series per forecast road required"));
        }
        let mut truth = Vec::with_capacity(w * n * f);
        let mut mask = Vec::with_capacity(w * n * f);
        for win in 0..w {
            for road in 0..n {
                for h in 0..f {
                    let k = self
                        .target_step(win, h)
                        .checked_sub(start)
                        .filter(|&k| k < values[road].len())
                        .ok_or_else(|| Error::invalid("truth series does not cover the forecast steps"))?;
                    truth.push(values[road][k]);
                    mask.push(observed[road][k]);
                }
            }
        }
        Ok((Tensor::new(vec![w, n, f], truth)?, mask))
    }
}

/// Encoder embeddings `[N, D]` of prepared roads, optionally from only the
/// most recent `history_limit` steps.
pub fn embed_roads(encoder: &Encoder, prepared: &Prepared, seed: u64, history_limit: Option<usize>) -> Result<Tensor> {
    let histories: Vec<&[f64]> = prepared
        .encoder_series()
        .iter()
        .map(|s| &s[s.len() - history_limit.unwrap_or(s.len()).min(s.len())..])
        .collect();
    let seeds: Vec<u64> = prepared.road_ids.iter().map(|id| road_seed(seed, id)).collect();
    let rows = encoder.embed(&histories, &seeds)?;
    let n = rows.len();
    Ok(Tensor::new(vec![n, encoder.dim], rows.concat())?)
}

impl Forecaster {
    pub fn new(cfg: BackboneConfig, flags: Flags, embed_dim: usize, model_seed: u64, scalers: Scalers) -> Result<Self> {
        if flags.decoupling != scalers.residual.is_some() {
            return Err(Error::Config("residual scaler must be present exactly when decoupling is on".into()));
        }
        Ok(Self { backbone: Backbone::new(cfg, flags, embed_dim, model_seed)?, scalers })
    }

    pub fn flags(&self) -> Flags {
        self.backbone.flags
    }

    /// Scaled-target outputs `[B, N, F]` mapped back to mph at the given steps.
    fn to_mph(
        &self,
        out: &Tensor,
        road_ids: &[String],
        steps: impl Fn(usize, usize) -> usize,
        periodic: Option<&PeriodicModel>,
    ) -> Result<Vec<f64>> {
        let s = out.shape();
        let (b, n, f) = (s[0], s[1], s[2]);
        let target = self.scalers.target();
        let roads: Vec<Option<usize>> = match periodic {
            Some(m) => road_ids.iter().map(|id| m.road_index(id).map(Some)).collect::<Result<_>>()?,
            None => vec![None; n],
        };
        let mut mph = Vec::with_capacity(out.numel());
        for w in 0..b {
            for (road, r) in roads.iter().enumerate() {
                for h in 0..f {
                    let y = target.invert(out.data()[(w * n + road) * f + h]);
                    let s_k = match (periodic, r) {
                        (Some(m), Some(r)) => m.value(*r, steps(w, h)),
                        _ => 0.0,
                    };
                    mph.push(y + s_k);
                }
            }
        }
        Ok(mph)
    }

    fn check_periodic(&self, periodic: Option<&PeriodicModel>) -> Result<()> {
        if self.flags().decoupling && periodic.is_none() {
            return Err(Error::invalid("decoupled model needs a periodic model for recoupling"));
        }
        Ok(())
    }

    /// Forecasts every window of `prepared` whose targets fall inside it.
    pub fn forecast_windows(
        &self,
        prepared: &Prepared,
        supports: &Supports,
        embeddings: Option<&Tensor>,
        periodic: Option<&PeriodicModel>,
        batch_size: usize,
    ) -> Result<Forecasts> {
        self.check_periodic(periodic)?;
        let cfg = &self.backbone.cfg;
        let source = prepared.window_source();
        let mut pred = Vec::new();
        let mut starts = Vec::new();
        for batch in window_iter(&source, cfg.input_len, cfg.horizon, batch_size, None)? {
            let out = self.backbone.predict(&batch.inputs, supports, embeddings)?;
            let ws = &batch.window_start_indices;
            pred.extend(self.to_mph(&out, &prepared.road_ids, |w, h| ws[w] + cfg.input_len + h, periodic)?);
            starts.extend_from_slice(ws);
        }
        let (w, n) = (starts.len(), prepared.num_roads());
        Ok(Forecasts {
            road_ids: prepared.road_ids.clone(),
            window_starts: starts,
            input_len: cfg.input_len,
            pred: Tensor::new(vec![w, n, cfg.horizon], pred)?,
        })
    }

    /// Forecasts the `horizon` steps right after the end of `prepared`.
    pub fn forecast_next(
        &self,
        prepared: &Prepared,
        supports: &Supports,
        embeddings: Option<&Tensor>,
        periodic: Option<&PeriodicModel>,
    ) -> Result<Forecasts> {
        self.check_periodic(periodic)?;
        let l = self.backbone.cfg.input_len;
        let len = prepared.steps.len();
        if len < l {
            return Err(Error::invalid(format!("{len} steps of history, at least {l} required")));
        }
        let channels = {
            let mut c = vec![&prepared.raw];
            c.extend(prepared.residual.as_ref());
            c
        };
        let n = prepared.num_roads();
        let mut inputs = Vec::with_capacity(n * l * channels.len());
        for road in 0..n {
            for t in len - l..len {
                inputs.extend(channels.iter().map(|ch| ch[road][t]));
            }
        }
        let x = Tensor::new(vec![1, n, l, channels.len()], inputs)?;
        let out = self.backbone.predict(&x, supports, embeddings)?;
        let start = prepared.steps.end - l;
        let pred = self.to_mph(&out, &prepared.road_ids, |_, h| start + l + h, periodic)?;
        Ok(Forecasts {
            road_ids: prepared.road_ids.clone(),
            window_starts: vec![start],
            input_len: l,
            pred: Tensor::new(out.shape().to_vec(), pred)?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let b = &self.backbone;
        Checkpoint::new(
            FORECASTER_KIND,
            b.params.clone(),
            ParamSet::new(),
            json!({
                "config": b.cfg,
                "flags": b.flags,
                "embed_dim": b.embed_dim,
                "scalers": self.scalers,
            }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |name: &str| {
            ck.meta.get(name).cloned().ok_or_else(|| Error::invalid(format!("forecaster checkpoint lacks {name}")))
        };
        let cfg: BackboneConfig = serde_json::from_value(field("config")?)?;
        let flags: Flags = serde_json::from_value(field("flags")?)?;
        let embed_dim: usize = serde_json::from_value(field("embed_dim")?)?;
        let scalers: Scalers = serde_json::from_value(field("scalers")?)?;
        let mut model = Self::new(cfg, flags, embed_dim, 0, scalers)?;
        for (name, t) in model.backbone.params.iter() {
            match ck.params.get(name) {
                Some(got) if got.shape() == t.shape() => {}
                Some(got) => {
                    return Err(Error::invalid(format!("forecaster parameter {name} has shape {:?}", got.shape())))
                }
                None => return Err(Error::invalid(format!("forecaster checkpoint lacks {name}"))),
            }
        }
        if ck.params.len() != model.backbone.params.len() {
            return Err(Error::invalid("forecaster checkpoint has parameters the configuration does not use"));
        }
        model.backbone.params = ck.params.clone();
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?.expect_kind(FORECASTER_KIND, dir)?)
    }
}
