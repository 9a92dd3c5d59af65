//! Compare tape gradients with finite differences for a small composite function.

use scpt::autograd::{finite_diff_check, Tape, Tensor};

fn main() {
    let point = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let w = Tensor::new(vec![4, 2], vec![0.5, -1.0, 0.25, 2.0, -0.75, 0.1, 1.5, -0.3]).unwrap();
    let err = finite_diff_check(
        |t: &mut Tape, x| {
            let w = t.constant(w.clone())?;
            let h = t.matmul(x, w)?;
            let h = t.tanh(h)?;
            let h = t.softmax(h, 1)?;
            let h = t.mul(h, h)?;
            t.sum(h)
        },
        &point,
        1e-6,
    )
    .unwrap();
    println!("worst relative error {err:.2e}");
}
