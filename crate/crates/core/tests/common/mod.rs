//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use precoder::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_frame(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

pub fn naive_mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = a.data()[i] - b.data()[i];
        sum += d * d;
    }
    sum / a.len() as f64
}

pub fn naive_psnr(a: &Tensor<f64>, b: &Tensor<f64>, pix_max: f64) -> f64 {
    10.0 * (pix_max * pix_max / naive_mse(a, b)).log10()
}

/// Direct double loop over every valid 11×11 window with two-pass moments.
pub fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>, pix_max: f64) -> f64 {
    let s = a.shape();
    let (channels, h, w) = (s[0], s[1], s[2]);
    let weight = |i: usize, j: usize| {
        let raw = |i: usize, j: usize| {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp()
        };
        let mut total = 0.0;
        for p in 0..11 {
            for q in 0..11 {
                total += raw(p, q);
            }
        }
        raw(i, j) / total
    };
    let c1 = (0.01 * pix_max) * (0.01 * pix_max);
    let c2 = (0.03 * pix_max) * (0.03 * pix_max);
    let at = |t: &Tensor<f64>, c: usize, y: usize, x: usize| t.data()[(c * h + y) * w + x];
    let mut per_channel = 0.0;
    for c in 0..channels {
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        mx += weight(i, j) * at(a, c, y + i, x + j);
                        my += weight(i, j) * at(b, c, y + i, x + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let dx = at(a, c, y + i, x + j) - mx;
                        let dy = at(b, c, y + i, x + j) - my;
                        vx += weight(i, j) * dx * dx;
                        vy += weight(i, j) * dy * dy;
                        cov += weight(i, j) * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += sum / count as f64;
    }
    per_channel / channels as f64
}

/// Mean absolute difference between two equally shaped tensors.
pub fn mean_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
}
