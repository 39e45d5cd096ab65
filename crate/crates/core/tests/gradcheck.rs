mod common;

use branchtune::ssl::{info_nce, mse_loss};
use branchtune::Tensor;
use common::{grad_check, probe_sum};

const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, seed, 1.0).unwrap()
}

#[test]
fn conv2d_matches_finite_differences() {
    for (stride, pad, k) in [(1, (1, 1), (3, 3)), (2, (0, 1), (1, 3)), (2, (0, 0), (1, 1)), (1, (0, 0), (3, 3))] {
        let inputs = [randn(&[2, 3, 6, 5], 1), randn(&[4, 3, k.0, k.1], 2), randn(&[4], 3)];
        let err = grad_check(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            probe_sum(t, y, 9)
        });
        assert!(err < TOL, "stride {stride} pad {pad:?} kernel {k:?}: {err:e}");
    }
}

#[test]
fn batch_norm_train_matches_finite_differences() {
    let inputs = [randn(&[4, 3, 3, 3], 4), randn(&[3], 5), randn(&[3], 6)];
    let err = grad_check(&inputs, |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
        probe_sum(t, y, 10)
    });
    assert!(err < TOL, "{err:e}");
    // dense 2-D input as well
    let inputs = [randn(&[5, 4], 7), randn(&[4], 8), randn(&[4], 9)];
    let err = grad_check(&inputs, |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
        probe_sum(t, y, 11)
    });
    assert!(err < TOL, "{err:e}");
}

#[test]
fn info_nce_matches_finite_differences() {
    for (n, d, tau) in [(2, 3, 0.5), (5, 4, 0.1), (8, 6, 1.0)] {
        let inputs = [randn(&[n, d], 12 + n as u64), randn(&[n, d], 20 + n as u64)];
        let err = grad_check(&inputs, |t, v| info_nce(t, v[0], v[1], tau).unwrap());
        assert!(err < TOL, "N={n} tau={tau}: {err:e}");
    }
}

#[test]
fn mse_loss_matches_finite_differences() {
    let inputs = [randn(&[6, 5], 30), randn(&[6, 5], 31)];
    let err = grad_check(&inputs, |t, v| mse_loss(t, v[0], v[1]).unwrap());
    assert!(err < TOL, "{err:e}");
}

#[test]
fn composed_ops_match_finite_differences() {
    let inputs = [randn(&[2, 2, 4, 4], 40), randn(&[3, 2, 3, 3], 41), randn(&[3, 5], 42)];
    let err = grad_check(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, (1, 1)).unwrap();
        let y = t.relu(y).unwrap();
        let y = t.max_pool2x2(y).unwrap();
        let y = t.global_avg_pool(y).unwrap();
        let z = t.matmul(y, v[2]).unwrap();
        let z = t.l2_normalize_rows(z).unwrap();
        probe_sum(t, z, 43)
    });
    assert!(err < TOL, "{err:e}");
}
