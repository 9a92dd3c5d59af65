//! Named parameter sets, initialization, the Adam optimizer and running
//! batch-norm statistics shared by the encoder and the forecasting model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, NormMode, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape`, trainable when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable { tape.param(t.clone())? } else { tape.constant(t.clone())? };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Registers only the tensors whose name starts with one of `prefixes`.
    pub fn bind_prefixed(&self, tape: &mut Tape, prefixes: &[&str]) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                vars.insert(name.clone(), tape.param(t.clone())?);
            }
        }
        Ok(Bound { vars })
    }
}

/// Parameters registered on one tape.
#[derive(Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps externally registered variables, e.g. slices of one flat parameter vector.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Moves the gradient of each bound parameter out of `grads`, by name.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g))).collect()
    }
}

/// `x · W + b` with `W` named `{name}.weight` and `b` named `{name}.bias`.
pub fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.var(&format!("{name}.weight")))?;
    Ok(tape.add_bias(h, p.var(&format!("{name}.bias")))?)
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }

    /// Fully connected layer with uniform(±1/sqrt(fan_in)) weights and bias.
    pub fn linear(&mut self, params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        params.insert(format!("{name}.weight"), self.uniform(&[fan_in, fan_out], bound));
        params.insert(format!("{name}.bias"), self.uniform(&[fan_out], bound));
    }

    /// Channels-last convolution kernel `[window, c_in, c_out]` plus bias.
    pub fn conv(&mut self, params: &mut ParamSet, name: &str, window: usize, c_in: usize, c_out: usize) {
        let bound = 1.0 / ((window * c_in) as f64).sqrt();
        params.insert(format!("{name}.weight"), self.uniform(&[window, c_in, c_out], bound));
        params.insert(format!("{name}.bias"), self.uniform(&[c_out], bound));
    }

    pub fn norm(&mut self, params: &mut ParamSet, name: &str, channels: usize) {
        params.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Folds one batch's (mean, biased variance) over `rows` samples in with
    /// momentum [`BN_MOMENTUM`]; the variance is stored unbiased.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], rows: usize) {
        let correction = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
        for i in 0..self.mean.len() {
            self.mean[i] = (1.0 - BN_MOMENTUM) * self.mean[i] + BN_MOMENTUM * batch_mean[i];
            self.var[i] = (1.0 - BN_MOMENTUM) * self.var[i] + BN_MOMENTUM * batch_var[i] * correction;
        }
    }

    pub fn mode(&self) -> NormMode {
        NormMode::Running { mean: self.mean.clone(), var: self.var.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Adaptive first/second-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, g) in grads {
            let p =
                params.get_mut(name).ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient shape mismatch for {name}")));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + c.weight_decay * *w;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
