//! Partition roads and time into the nine labelled cells.

use scpt::split::{make_split, Label};

fn main() -> scpt::Result<()> {
    let ids: Vec<String> = (0..20).map(|i| format!("s{i:03}")).collect();
    let k = 14 * 288;
    let split = make_split(&ids, k, [0.7, 0.1, 0.2], [0.7, 0.1, 0.2], 3)?;
    println!("t1 = {}, t2 = {} of {k} steps", split.t1, split.t2);
    for label in Label::ALL {
        let roads = split.sensors(label.roads());
        let steps = split.period(label.period(), k);
        println!("{label}: {:>2} roads x steps {:>4}..{:<4}", roads.len(), steps.start, steps.end);
    }
    println!("unseen test roads: {:?}", split.test_sensors);
    Ok(())
}
