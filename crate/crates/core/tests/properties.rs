mod common;

use branchtune::branch::pad_kernel;
use branchtune::cka::{cka, FeatureMatrix};
use branchtune::{Tape, Tensor};
use common::conv_reference;
use proptest::prelude::*;

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: (usize, usize)) -> Vec<f64> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(x), tape.leaf(w));
    let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
    tape.value(y).to_vec()
}

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, seed, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padded_kernel_computes_the_same_convolution(
        wide in any::<bool>(), n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, w in 3usize..9, stride in 1usize..3, seed in any::<u64>(),
    ) {
        let (kh, kw) = if wide { (1, 3) } else { (1, 1) };
        let x = tensor(&[n, c, h, w], seed);
        let k = tensor(&[o, c, kh, kw], seed ^ 1);
        let big = conv(&x, &pad_kernel(&k, 3, 3).unwrap(), stride, (1, 1));
        let small = conv(&x, &k, stride, (1 - (3 - kh) / 2, 1 - (3 - kw) / 2));
        prop_assert_eq!(small.len(), big.len());
        for (a, b) in small.iter().zip(&big) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn im2col_convolution_matches_direct_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 3usize..8, w in 3usize..8,
        kh in prop::sample::select(vec![1usize, 3]), kw in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, ph in 0usize..2, pw in 0usize..2, seed in any::<u64>(),
    ) {
        let x = tensor(&[n, c, h, w], seed);
        let k = tensor(&[o, c, kh, kw], seed ^ 7);
        let fast = conv(&x, &k, stride, (ph, pw));
        let slow = conv_reference(&x, &k, stride, (ph, pw));
        prop_assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cka_is_symmetric_and_bounded(rows in 2usize..12, dx in 1usize..6, dy in 1usize..6, seed in any::<u64>()) {
        let x = FeatureMatrix::new(rows, dx, tensor(&[rows, dx], seed).into_data()).unwrap();
        let y = FeatureMatrix::new(rows, dy, tensor(&[rows, dy], seed ^ 3).into_data()).unwrap();
        let (a, b) = (cka(&x, &y).unwrap(), cka(&y, &x).unwrap());
        prop_assert!((a - b).abs() <= 1e-7);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
