//! Finite-difference trials for every differentiable tape op and for the
//! full forecasting loss.

mod common;

use common::gradcheck::{self, Checks, END_TO_END, PER_OP};

fn assert_ops(group: fn(&mut Checks)) {
    let mut c = Checks::default();
    group(&mut c);
    for (name, err) in c.worst {
        assert!(err < PER_OP, "{name}: relative error {err:e}");
    }
}

#[test]
fn elementwise_and_shape_ops() {
    assert_ops(gradcheck::elementwise_and_shape_ops);
}

#[test]
fn linear_algebra_ops() {
    assert_ops(gradcheck::linear_algebra_ops);
}

#[test]
fn normalization_pooling_and_losses() {
    assert_ops(gradcheck::normalization_pooling_and_losses);
}

#[test]
fn end_to_end_forecasting_loss_on_three_roads() {
    let err = gradcheck::end_to_end_error();
    assert!(err < END_TO_END, "end-to-end relative error {err:e}");
}
