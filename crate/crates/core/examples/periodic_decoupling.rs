//! Fit the truncated-DCT periodic model and split one road into periodic and residual parts.

use scpt::data::{generate_synthetic, SynthConfig};
use scpt::decouple::fit_periodic_split;
use scpt::split::{make_split, Label, Protocol, Purpose};

fn main() -> scpt::Result<()> {
    let data = generate_synthetic(&SynthConfig { sensors: 10, days: 21, seed: 1, ..Default::default() })?;
    let ds = &data.dataset;
    let manifest = make_split(ds.sensor_ids(), ds.num_steps(), [0.7, 0.1, 0.2], [0.7, 0.1, 0.2], 0)?;
    let protocol = Protocol::new(ds, &manifest)?;
    let model = fit_periodic_split(&protocol, 2016)?;
    println!("cutoff {} of {} coefficients", model.cutoff, model.train_length);
    println!("validation MAE of s(k): {:.3}", model.validation_mae.unwrap_or(f64::NAN));

    let view = protocol.view(Purpose::Evaluation, &[Label::I])?;
    let id = view.sensor_ids()[0].clone();
    let range = manifest.t2..manifest.t2 + 6;
    let s = model.periodic(&id, range.clone())?;
    let row = ds.row(ds.sensor_index(&id).unwrap());
    for (k, p) in range.zip(s) {
        println!("{id} step {k}: x = {:6.2}  s = {p:6.2}  residual = {:+.2}", row[k], row[k] - p);
    }
    Ok(())
}
