//! Generate a synthetic sensor network and write it as CSV.
//!
//! cargo run --example synth_dataset -- [out_dir]

use scpt::data::{generate_synthetic, save_dataset, SynthConfig};

fn main() -> scpt::Result<()> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("scpt-synth"));
    let cfg = SynthConfig { sensors: 12, days: 14, seed: 7, ..Default::default() };
    let data = generate_synthetic(&cfg)?;
    let ds = &data.dataset;
    save_dataset(ds, &dir)?;
    println!("{} sensors x {} steps, {} missing cells", ds.num_sensors(), ds.num_steps(), ds.missing_count());
    println!("mean observed speed {:.2} mph", ds.observed_mean());
    let edges = ds.adjacency().iter().filter(|w| **w > 0.0).count() - ds.num_sensors();
    println!("{edges} directed edges; written to {}", dir.display());
    Ok(())
}
