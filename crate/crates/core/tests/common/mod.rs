#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scpt::autograd::{Tape, Tensor, Var};
use scpt::backbone::{BackboneConfig, Flags};
use scpt::data::{generate_synthetic, SynthConfig, TrafficDataset};
use scpt::pipeline::PipelineConfig;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ w ⊙ y` with fixed random weights, so every output feeds the scalar.
pub fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var, scpt::autograd::TensorError> {
    let w = t.constant(random(t.shape(y), seed))?;
    let m = t.mul(y, w)?;
    t.sum(m)
}

pub fn synthetic(sensors: usize, days: usize, seed: u64) -> TrafficDataset {
    generate_synthetic(&SynthConfig { sensors, days, seed, ..Default::default() }).unwrap().dataset
}

/// Small, fast end-to-end configuration.
pub fn quick_config(flags: Flags) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.pretrain.epochs = 3;
    cfg.pretrain.dim = 8;
    cfg.train.epochs = 2;
    cfg.train.max_batches_per_epoch = Some(3);
    cfg.train.batch_size = 8;
    cfg.train.flags = flags;
    cfg.train.backbone = BackboneConfig { hidden: 8, skip: 8, end: 16, gate_hidden: 16, ..Default::default() };
    cfg.eval.batch_size = 128;
    cfg
}
