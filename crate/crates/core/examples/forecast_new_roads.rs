//! Train once, then forecast roads that never took part in training, from two days of history.

use scpt::data::{generate_synthetic, SynthConfig, TrafficDataset};
use scpt::encoder::MIN_HISTORY;
use scpt::harness::forecast_new_roads;
use scpt::pipeline::{run_pipeline, PipelineConfig};

fn main() -> scpt::Result<()> {
    let train = generate_synthetic(&SynthConfig { sensors: 16, days: 14, seed: 0, ..Default::default() })?;
    let mut cfg = PipelineConfig::default();
    cfg.pretrain.epochs = 10;
    cfg.train.epochs = 2;
    cfg.train.max_batches_per_epoch = Some(10);
    let out = run_pipeline(&train.dataset, &cfg)?;

    // a separate network; keep only its first two days plus one input window
    let other = generate_synthetic(&SynthConfig { sensors: 5, days: 4, seed: 99, ..Default::default() })?.dataset;
    let keep = MIN_HISTORY;
    let rows: Vec<usize> = (0..other.num_sensors()).collect();
    let new = TrafficDataset::new(
        other.sensor_ids().iter().map(|id| format!("new-{id}")).collect(),
        other.timestamps()[..keep].to_vec(),
        rows.iter().flat_map(|&i| other.row(i)[..keep].to_vec()).collect(),
        rows.iter().flat_map(|&i| other.observed_row(i)[..keep].to_vec()).collect(),
        other.adjacency().to_vec(),
    )?;
    let fc = forecast_new_roads(&new, &out.model, out.encoder.as_ref(), out.periodic.as_ref(), 0)?;
    for (r, id) in fc.road_ids.iter().enumerate() {
        let truth = other.value(r, keep + 11);
        println!("{id}: next hour {:.1} mph (observed later: {truth:.1})", fc.pred.get(&[0, r, 11]));
    }
    Ok(())
}
