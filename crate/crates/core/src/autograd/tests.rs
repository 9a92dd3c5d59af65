use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_returns_vector() {
    let mut t = Tape::new();
    let i = t.constant(Tensor::identity(2)).unwrap();
    let v = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
    let vt = t.transpose(v).unwrap();
    let out = t.matmul(vt, i).unwrap();
    assert_eq!(t.value(out).data(), &[3.0, 4.0]);
}

#[test]
fn relu_sign_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv1d_length_rule() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 2016, 1], 0.5)).unwrap();
    let w = t.constant(Tensor::full(&[13, 1, 2], 0.1)).unwrap();
    let y = t.conv1d(x, w, None, 1, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 2004, 2]);
    assert_eq!(conv_output_len(2016, 13, 1, 1), Some(2004));
    assert_eq!(conv_output_len(12, 2, 1, 2), Some(10));
    assert_eq!(conv_output_len(12, 13, 1, 1), None);
}

#[test]
fn conv1d_rejects_short_input_and_zero_stride() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 5, 1], 1.0)).unwrap();
    let w = t.constant(Tensor::full(&[6, 1, 1], 1.0)).unwrap();
    assert!(t.conv1d(x, w, None, 1, 1).is_err());
    let w2 = t.constant(Tensor::full(&[2, 1, 1], 1.0)).unwrap();
    assert!(t.conv1d(x, w2, None, 0, 1).is_err());
}

#[test]
fn square_derivative() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0)).unwrap();
    let y = t.mul(x, x).unwrap();
    let g = t.backward_scalar(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn dead_relu_has_zero_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(-1.0)).unwrap();
    let y = t.relu(x).unwrap();
    let g = t.backward_scalar(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 0.0);
}

#[test]
fn non_participating_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let unused = t.param(Tensor::vector(vec![5.0])).unwrap();
    let y = t.sum(x).unwrap();
    let g = t.backward_scalar(y).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
}

#[test]
fn backward_twice_is_rejected() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(2.0)).unwrap();
    let y = t.mul(x, x).unwrap();
    t.backward_scalar(y).unwrap();
    assert_eq!(t.backward_scalar(y).unwrap_err(), TensorError::Consumed);
}

#[test]
fn seed_shape_must_match_output() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let y = t.relu(x).unwrap();
    assert!(t.backward(y, Tensor::scalar(1.0)).is_err());
}

#[test]
fn shape_mismatch_reports_extents() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[3, 2])).unwrap();
    match t.add(a, b).unwrap_err() {
        TensorError::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn non_finite_input_rejected() {
    let mut t = Tape::new();
    assert!(matches!(t.constant(Tensor::vector(vec![1.0, f64::NAN])), Err(TensorError::NonFinite { .. })));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let x = t.constant(random(&mut rng, &[3, 5, 4]).map(|v| v * 30.0)).unwrap();
    for axis in 0..3 {
        let y = t.softmax(x, axis).unwrap();
        let v = t.value(y);
        let s = v.shape().to_vec();
        let (outer, len, inner) = tensor::axis_split(&s, axis);
        for o in 0..outer {
            for j in 0..inner {
                let total: f64 = (0..len).map(|i| v.data()[(o * len + i) * inner + j]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(v.data().iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let point = random(&mut rng, &[4, 3]);
    let targets = [0, 2, 1, 1];
    let err = finite_diff_check(|t, x| t.cross_entropy(x, &targets, &[None; 4]), &point, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn finite_diff_of_sum_of_squares_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let point = random(&mut rng, &[6]);
    let sq = finite_diff_check(
        |t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(sq < 1e-6, "{sq}");
    let lin = finite_diff_check(|t, x| t.sum(x), &point, 1e-5).unwrap();
    assert!(lin < 1e-9, "{lin}");
}

#[test]
fn finite_diff_of_relu_away_from_kink() {
    let point = Tensor::vector(vec![-0.7, 0.3, 1.2, -0.05, 0.9]);
    let err = finite_diff_check(
        |t, x| {
            let y = t.relu(x)?;
            t.sum(y)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn finite_diff_rejects_bad_step() {
    let p = Tensor::scalar(1.0);
    assert!(finite_diff_check(|t, x| t.sum(x), &p, 0.0).is_err());
}

#[test]
fn inference_batch_norm_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[5, 3]);
    let mode = NormMode::Running { mean: vec![0.1, -0.2, 0.3], var: vec![1.5, 0.5, 2.0] };
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let g = t.constant(Tensor::vector(vec![2.0, 1.0, -1.0])).unwrap();
    let b = t.constant(Tensor::vector(vec![0.5, 0.0, 1.0])).unwrap();
    let y = t.batch_norm(xv, g, b, &mode).unwrap();
    let NormMode::Running { mean, var } = &mode else { unreachable!() };
    let gamma = [2.0, 1.0, -1.0];
    let beta = [0.5, 0.0, 1.0];
    for r in 0..5 {
        for c in 0..3 {
            let expect = gamma[c] * (x.get(&[r, c]) - mean[c]) / (var[c] + BN_EPS).sqrt() + beta[c];
            assert!((t.value(y).get(&[r, c]) - expect).abs() < 1e-14);
        }
    }
    assert!(t.batch_stats(y).is_none());
}

#[test]
fn batch_mode_exposes_biased_statistics() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap()).unwrap();
    let g = t.constant(Tensor::vector(vec![1.0])).unwrap();
    let b = t.constant(Tensor::vector(vec![0.0])).unwrap();
    let y = t.batch_norm(x, g, b, &NormMode::Batch).unwrap();
    let (mean, var) = t.batch_stats(y).unwrap();
    assert_eq!(mean, &[2.0]);
    assert_eq!(var, &[1.0]);
}

#[test]
fn pooling_reduces_named_axis() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 10.0, 3.0, 10.0, 2.0, 10.0]).unwrap()).unwrap();
    let mean = t.pool(x, 1, PoolKind::Mean).unwrap();
    let std = t.pool(x, 1, PoolKind::Std).unwrap();
    let max = t.pool(x, 1, PoolKind::Max).unwrap();
    assert_eq!(t.value(mean).data(), &[2.0, 10.0]);
    assert!((t.value(std).data()[0] - (2.0f64 / 3.0 + STD_EPS).sqrt()).abs() < 1e-15);
    assert_eq!(t.value(std).data()[1], STD_EPS.sqrt());
    assert_eq!(t.value(max).data(), &[3.0, 10.0]);
}

#[test]
fn broadcast_round_trips_gradient_sum() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
    let y = t.broadcast(x, &[3, 2, 4]).unwrap();
    assert_eq!(t.value(y).get(&[2, 1, 3]), 2.0);
    let s = t.sum(y).unwrap();
    let g = t.backward_scalar(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[12.0, 12.0]);
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut t = Tape::new();
        let x = t.param(random(&mut rng, &[4, 6])).unwrap();
        let w = t.param(random(&mut rng, &[6, 3])).unwrap();
        let h = t.matmul(x, w).unwrap();
        let h = t.tanh(h).unwrap();
        let s = t.softmax(h, 1).unwrap();
        let l = t.mean(s).unwrap();
        let out = t.value(h).clone();
        let g = t.backward_scalar(l).unwrap();
        (out, g.get(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

#[test]
fn cross_entropy_exclusion_and_validation() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
    let l = t.cross_entropy(x, &[1], &[Some(0)]).unwrap();
    assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);
    assert!(t.cross_entropy(x, &[0], &[Some(0)]).is_err());
    assert!(t.cross_entropy(x, &[3], &[None]).is_err());
}

#[test]
fn masked_mae_ignores_masked_entries() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::vector(vec![1.0, 5.0, 2.0])).unwrap();
    let target = Tensor::vector(vec![0.0, 0.0, 4.0]);
    let l = t.masked_mae(p, &target, &[true, false, true]).unwrap();
    assert_eq!(t.value(l).item(), 1.5);
    assert!(t.masked_mae(p, &target, &[false; 3]).is_err());
}

#[test]
fn gather_selects_per_batch_rows() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![2, 3, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap();
    let y = t.gather(x, vec![vec![2, 0], vec![1, 1]]).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 0.0, 4.0, 4.0]);
    let s = t.sum(y).unwrap();
    let g = t.backward_scalar(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
}

#[test]
fn tensors_move_between_threads() {
    let t = Tensor::vector(vec![1.0, 2.0]);
    let h = std::thread::spawn(move || t.data().iter().sum::<f64>());
    assert_eq!(h.join().unwrap(), 3.0);
    fn assert_send<T: Send + Sync>() {}
    assert_send::<Tensor>();
}

#[test]
fn random_points_cover_all_ops() {
    // smoke: every op kind differentiates at a random point
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(&mut rng, &[2, 4, 3]);
    let err = finite_diff_check(
        |t, x| {
            let w = t.constant(Tensor::full(&[2, 3, 3], 0.3))?;
            let c = t.conv1d(x, w, None, 1, 1)?;
            let s = t.sigmoid(c)?;
            let p = t.pool(s, 1, PoolKind::Std)?;
            t.sum(p)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
