//! Frame metrics against direct-loop reference implementations.

mod common;

use common::{naive_mse, naive_psnr, naive_ssim, random_frame};
use precoder::metrics::{copy_last_frame, mse, psnr, psnr_from_mse, ssim, MetricReport};
use precoder::Tensor;
use proptest::prelude::*;

const TOLERANCE: f64 = 1e-9;

#[test]
fn match_naive_oracles_on_random_frames() {
    for seed in 0..5u64 {
        let a = random_frame(10 * seed, &[3, 32, 32]);
        let b = random_frame(10 * seed + 1, &[3, 32, 32]);
        assert!((mse(&a, &b).unwrap() - naive_mse(&a, &b)).abs() < TOLERANCE);
        assert!((psnr(&a, &b, 1.0).unwrap() - naive_psnr(&a, &b, 1.0)).abs() < TOLERANCE);
        assert!((ssim(&a, &b, 1.0).unwrap() - naive_ssim(&a, &b, 1.0)).abs() < TOLERANCE);
    }
}

#[test]
fn ssim_matches_oracle_on_structured_frames_and_other_ranges() {
    // A shifted, noisy copy gives SSIM well away from 0 and 1.
    let base = random_frame(3, &[1, 24, 20]);
    let shifted = Tensor::from_fn(&[1, 24, 20], |i| {
        let (y, x) = (i / 20, i % 20);
        0.7 * base.data()[y * 20 + (x + 1) % 20] + 0.1
    });
    let s = ssim(&base, &shifted, 1.0).unwrap();
    assert!((s - naive_ssim(&base, &shifted, 1.0)).abs() < TOLERANCE);
    let scaled = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| 255.0 * t.data()[i]);
    let s255 = ssim(&scaled(&base), &scaled(&shifted), 255.0).unwrap();
    assert!((s255 - s).abs() < 1e-9, "SSIM is invariant to a common rescaling of data and range");
}

#[test]
fn identities() {
    let x = random_frame(1, &[3, 32, 32]);
    assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
    assert_eq!(mse(&x, &x).unwrap(), 0.0);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
    assert!((psnr_from_mse(1e-4, 1.0) - 40.0).abs() < 1e-12);

    let a = Tensor::<f64>::full(&[1, 16, 16], 0.5);
    let b = Tensor::<f64>::full(&[1, 16, 16], 0.6);
    let closed = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
    assert!((ssim(&a, &b, 1.0).unwrap() - closed).abs() < TOLERANCE);
    assert!((closed - 0.983609).abs() < 1e-6);
}

#[test]
fn rejects_bad_inputs() {
    let a = random_frame(1, &[3, 16, 16]);
    assert!(mse(&a, &random_frame(2, &[3, 16, 15])).is_err());
    assert!(ssim(&random_frame(3, &[1, 10, 16]), &random_frame(4, &[1, 10, 16]), 1.0).is_err());
    assert!(ssim(&a, &a, 0.0).is_err());
}

#[test]
fn single_changed_pixel() {
    let a = Tensor::<f64>::zeros(&[1, 12, 16]);
    let mut b = a.clone();
    b.data_mut()[5 * 16 + 7] = 1.0;
    assert!((mse(&a, &b).unwrap() - 1.0 / 192.0).abs() < 1e-15);
    assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * 192f64.log10()).abs() < 1e-12);
    assert!((ssim(&a, &b, 1.0).unwrap() - naive_ssim(&a, &b, 1.0)).abs() < TOLERANCE);
}

#[test]
fn report_excludes_infinite_psnr_from_the_mean() {
    let frames: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::full(&[1, 12, 12], 0.5)).collect();
    let mut seq = frames.clone();
    seq[2] = Tensor::full(&[1, 12, 12], 0.6);
    let report = MetricReport::from_frames(vec![
        copy_last_frame(&seq, 1, 1.0).unwrap(),
        copy_last_frame(&seq, 2, 1.0).unwrap(),
    ]);
    let summary = report.summary();
    assert_eq!(summary.infinite_psnr_count, 1);
    assert!((summary.mean_psnr - 20.0).abs() < 1e-4);
    assert!(report.to_csv().starts_with("frame_index,mse,psnr,ssim\n"));
    assert!(copy_last_frame(&seq, 0, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn symmetric_and_bounded(seed in 0u64..10_000, h in 11usize..20, w in 11usize..20) {
        let a = random_frame(seed, &[2, h, w]);
        let b = random_frame(seed + 1, &[2, h, w]);
        let ab = ssim(&a, &b, 1.0).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a, 1.0).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert!(mse(&a, &b).unwrap() >= 0.0);
        prop_assert!(psnr(&a, &b, 1.0).unwrap() > 0.0);
    }
}
