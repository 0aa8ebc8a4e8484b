//! Library kernels against brute-force loops on random small cases.

mod common;

use common::*;
use latentguard_core::ops::{self, Conv3dSpec, ConvAlgo, PoolTarget};
use latentguard_core::par;
use latentguard_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u64 = 60;
const TOL: f64 = 1e-5;

fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[test]
fn conv3d_matches_naive_loops() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let k = [pick(&mut rng, 1, 3), pick(&mut rng, 1, 3), pick(&mut rng, 1, 3)];
        let stride = [pick(&mut rng, 1, 2), pick(&mut rng, 1, 2), pick(&mut rng, 1, 2)];
        let pad = [pick(&mut rng, 0, k[0] / 2 + 1).min(k[0] - 1), pick(&mut rng, 0, 1).min(k[1] - 1), pick(&mut rng, 0, 1).min(k[2] - 1)];
        let xd = vec![pick(&mut rng, 1, 2), pick(&mut rng, 1, 3), pick(&mut rng, k[0], 5), pick(&mut rng, k[1], 6), pick(&mut rng, k[2], 6)];
        let wd = vec![pick(&mut rng, 1, 4), xd[1], k[0], k[1], k[2]];
        let bias = rng.random_bool(0.5);

        let x = randn::<f32>(&xd, 1000 + case);
        let w = randn::<f32>(&wd, 2000 + case);
        let b = randn::<f32>(&[wd[0]], 3000 + case);
        let (expect, od) = conv3d_naive(&to_f64(&x), &xd, &to_f64(&w), &wd, bias.then(|| to_f64(&b)).as_deref(), stride, pad);
        let spec = Conv3dSpec::new(stride, pad);
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let y = ops::conv3d(&x, &w, bias.then_some(&b), &spec, algo).unwrap();
            assert_eq!(y.dims(), od.as_slice(), "case {case} {algo:?}");
            let err = max_abs(&to_f64(&y), &expect);
            assert!(err < TOL, "case {case} {algo:?}: {err}");
        }
    }
}

#[test]
fn conv3d_sequential_and_parallel_agree_bitwise() {
    let x = randn::<f32>(&[2, 3, 5, 7, 6], 1);
    let w = randn::<f32>(&[4, 3, 3, 3, 3], 2);
    let spec = Conv3dSpec::same3();
    for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
        par::set_parallel(true);
        let a = ops::conv3d(&x, &w, None, &spec, algo).unwrap();
        par::set_parallel(false);
        let b = ops::conv3d(&x, &w, None, &spec, algo).unwrap();
        par::set_parallel(true);
        assert!(a.bit_eq(&b), "{algo:?}");
    }
}

#[test]
fn maxpool3d_matches_naive_loops() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let k = [pick(&mut rng, 1, 2), pick(&mut rng, 1, 3), pick(&mut rng, 1, 3)];
        let s = [pick(&mut rng, 1, 2), pick(&mut rng, 1, 3), pick(&mut rng, 1, 3)];
        let xd = vec![pick(&mut rng, 1, 2), pick(&mut rng, 1, 3), pick(&mut rng, k[0], 5), pick(&mut rng, k[1], 7), pick(&mut rng, k[2], 7)];
        let x = randn::<f32>(&xd, 4000 + case);
        let (expect, od) = maxpool3d_naive(&to_f64(&x), &xd, k, s);
        let y = ops::maxpool3d(&x, k, s).unwrap().output;
        assert_eq!(y.dims(), od.as_slice(), "case {case}");
        assert!(max_abs(&to_f64(&y), &expect) < TOL, "case {case}");
    }
}

#[test]
fn adaptive_pools_match_naive_means() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + case);
        let xd = vec![pick(&mut rng, 1, 2), pick(&mut rng, 1, 4), pick(&mut rng, 1, 4), pick(&mut rng, 1, 6), pick(&mut rng, 1, 6)];
        let x = randn::<f32>(&xd, 5000 + case);
        let xs = to_f64(&x);
        let spatial = ops::adaptive_avg_pool(&x, PoolTarget::Spatial).unwrap();
        assert_eq!(spatial.dims(), &[xd[0], xd[1], xd[2]]);
        assert!(max_abs(&to_f64(&spatial), &avgpool_naive(&xs, &xd, true)) < TOL, "case {case}");
        let full = ops::adaptive_avg_pool(&x, PoolTarget::Full).unwrap();
        assert_eq!(full.dims(), &[xd[0], xd[1], 1, 1, 1]);
        assert!(max_abs(&to_f64(&full), &avgpool_naive(&xs, &xd, false)) < TOL, "case {case}");
    }
}

#[test]
fn linear_matches_naive_loops() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + case);
        let (rows, din, dout) = (pick(&mut rng, 1, 9), pick(&mut rng, 1, 17), pick(&mut rng, 1, 12));
        let x = randn::<f32>(&[rows, din], 6000 + case);
        let w = randn::<f32>(&[dout, din], 7000 + case);
        let b = randn::<f32>(&[dout], 8000 + case);
        let bias = rng.random_bool(0.5);
        let y = ops::linear(&x, &w, bias.then_some(&b)).unwrap();
        let expect = linear_naive(&to_f64(&x), rows, din, &to_f64(&w), dout, bias.then(|| to_f64(&b)).as_deref());
        assert_eq!(y.dims(), &[rows, dout]);
        assert!(max_abs(&to_f64(&y), &expect) < TOL, "case {case}");
    }
}

#[test]
fn linear_applies_to_leading_dims() {
    let x = randn::<f32>(&[2, 3, 5], 1);
    let w = randn::<f32>(&[4, 5], 2);
    let y = ops::linear(&x, &w, None).unwrap();
    assert_eq!(y.dims(), &[2, 3, 4]);
    let expect = linear_naive(&to_f64(&x), 6, 5, &to_f64(&w), 4, None);
    assert!(max_abs(&to_f64(&y), &expect) < TOL);
}

#[test]
fn softmax_rows_match_direct_formula() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + case);
        let (rows, cols) = (pick(&mut rng, 1, 6), pick(&mut rng, 1, 9));
        let x = randn::<f64>(&[rows, cols], 9000 + case).map(|v| v * 5.0);
        let y = ops::softmax(&x).unwrap();
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..cols {
                assert!((y.data()[r * cols + c] - row[c].exp() / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn two_class_cross_entropy_matches_binary_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let l = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
        let violating = rng.random_bool(0.5);
        let logits = Tensor::from_vec(vec![1, 2], l.to_vec()).unwrap();
        let onehot = if violating { vec![0.0, 1.0] } else { vec![1.0, 0.0] };
        let labels = Tensor::from_vec(vec![1, 2], onehot).unwrap();
        let (loss, _) = ops::cross_entropy(&logits, &labels).unwrap();
        assert!((loss - binary_ce(l, violating)).abs() < 1e-10);
    }
}
