//! Every combination of SGA, adaptive adjacency and decoupling on one split.

use scpt::backbone::Flags;
use scpt::data::{generate_synthetic, SynthConfig};
use scpt::pipeline::{run_pipeline, PipelineConfig};

fn main() -> scpt::Result<()> {
    let data = generate_synthetic(&SynthConfig { sensors: 20, days: 14, seed: 0, ..Default::default() })?;
    let mut cfg = PipelineConfig::default();
    cfg.pretrain.epochs = 10;
    cfg.train.epochs = 2;
    cfg.train.max_batches_per_epoch = Some(10);
    for flags in Flags::grid() {
        cfg.train.flags = flags;
        let r = run_pipeline(&data.dataset, &cfg)?.report;
        println!("{:<28} MAE {:.3}  @12 {:.3}", flags.label(), r.average.mae, r.mae_at(12).unwrap());
    }
    Ok(())
}
