//! Pre-train the road encoder with NT-Xent and embed a few roads.

use scpt::contrastive::{pretrain, PretrainConfig};
use scpt::data::{generate_synthetic, SynthConfig};
use scpt::decouple::fit_periodic_split;
use scpt::encoder::road_seed;
use scpt::prep::fit_scalers;
use scpt::split::{make_split, Protocol};

fn main() -> scpt::Result<()> {
    let data = generate_synthetic(&SynthConfig { sensors: 16, days: 14, seed: 2, ..Default::default() })?;
    let ds = &data.dataset;
    let manifest = make_split(ds.sensor_ids(), ds.num_steps(), [0.7, 0.1, 0.2], [0.7, 0.1, 0.2], 0)?;
    let protocol = Protocol::new(ds, &manifest)?;
    let periodic = fit_periodic_split(&protocol, 2016)?;
    let scalers = fit_scalers(&protocol, Some(&periodic))?;
    let cfg = PretrainConfig { epochs: 10, dim: 16, ..Default::default() };
    let out = pretrain(&protocol, &scalers, Some(&periodic), &cfg)?;
    for r in &out.log {
        println!("epoch {:>2}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss);
    }
    let ids = &manifest.test_sensors;
    let histories: Vec<&[f64]> = ids.iter().map(|id| &ds.row(ds.sensor_index(id).unwrap())[..manifest.t1]).collect();
    let seeds: Vec<u64> = ids.iter().map(|id| road_seed(0, id)).collect();
    for (id, e) in ids.iter().zip(out.encoder.embed(&histories, &seeds)?) {
        println!("{id}: {:?}", e.iter().take(4).map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    }
    Ok(())
}
