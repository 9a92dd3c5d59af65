//! Spread of unseen-road MAE across model seeds and split seeds.

use scpt::data::{generate_synthetic, SynthConfig};
use scpt::harness::seed_grid;
use scpt::pipeline::PipelineConfig;

fn main() -> scpt::Result<()> {
    let data = generate_synthetic(&SynthConfig { sensors: 16, days: 14, seed: 0, ..Default::default() })?;
    let mut cfg = PipelineConfig::default();
    cfg.pretrain.epochs = 5;
    cfg.train.epochs = 2;
    cfg.train.max_batches_per_epoch = Some(8);
    let grid = seed_grid(&data.dataset, &cfg, &[0, 1, 2], &[0, 1])?;
    print!("{}", grid.to_csv());
    Ok(())
}
