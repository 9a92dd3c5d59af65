//! The whole pipeline in memory: split, decouple, pre-train, train, evaluate on unseen roads.

use scpt::data::{generate_synthetic, SynthConfig};
use scpt::pipeline::{run_pipeline, PipelineConfig};

fn main() -> scpt::Result<()> {
    let data = generate_synthetic(&SynthConfig { sensors: 20, days: 14, seed: 0, ..Default::default() })?;
    let mut cfg = PipelineConfig::default();
    cfg.pretrain.epochs = 20;
    cfg.train.epochs = 3;
    cfg.train.max_batches_per_epoch = Some(20);
    let out = run_pipeline(&data.dataset, &cfg)?;
    for r in &out.train_log {
        println!("epoch {}  train loss {:.4}  val MAE {:.3}", r.epoch, r.train_loss, r.val_mae);
    }
    let r = &out.report;
    println!("{} unseen roads, {} windows", r.roads, r.windows);
    for h in [1, 3, 6, 12] {
        println!("horizon {h:>2}: MAE {:.3}", r.mae_at(h).unwrap());
    }
    println!("average MAE {:.3}  RMSE {:.3}  MAPE {:.2}%", r.average.mae, r.average.rmse, r.average.mape);
    println!("medianMAE12 {:.3}", r.median_mae_12.unwrap_or(f64::NAN));
    Ok(())
}
