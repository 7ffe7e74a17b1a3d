//! Frame-comparison measures: MSE, PSNR and SSIM, plus the copy-last-frame
//! baseline. Frames are `[C, H, W]` (or `[H, W]`) tensors; all arithmetic is
//! done in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn planes<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    match *a.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("frame {s:?} must be [C, H, W] or [H, W]"))),
    }
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    planes("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(pix_max² / mse)`; `+inf` for identical frames.
pub fn psnr_from_mse(mse: f64, pix_max: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (pix_max * pix_max / mse).log10()
    }
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, pix_max: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, pix_max))
}

/// Normalised 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let src = &plane[y * w + x..y * w + x + SSIM_WINDOW];
            rows[y * ow + x] = src.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| rows[(y + i) * ow + x] * g[i]).sum();
        }
    }
    out
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, valid positions), averaged
/// over positions and then over channels. Dynamic range `L = pix_max`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, pix_max: f64) -> Result<f64> {
    let (channels, h, w) = planes("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    if !(pix_max.is_finite() && pix_max > 0.0) {
        return Err(Error::Config(format!("pix_max {pix_max} must be positive")));
    }
    let c1 = (SSIM_K1 * pix_max).powi(2);
    let c2 = (SSIM_K2 * pix_max).powi(2);
    let g = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..channels {
        let x: Vec<f64> = a.data()[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(&x, h, w, &g);
        let mu_y = filter_valid(&y, h, w, &g);
        let e_xx = filter_valid(&xx, h, w, &g);
        let e_yy = filter_valid(&yy, h, w, &g);
        let e_xy = filter_valid(&xy, h, w, &g);
        let n = mu_x.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            sum += ((2.0 * (mx * my) + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / channels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub mse: f64,
    /// `+inf` for a perfect prediction.
    pub psnr: f64,
    pub ssim: f64,
}

pub fn compare<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>, pix_max: f64) -> Result<FrameMetrics> {
    let m = mse(prediction, target)?;
    Ok(FrameMetrics {
        mse: m,
        psnr: psnr_from_mse(m, pix_max),
        ssim: ssim(prediction, target, pix_max)?,
    })
}

/// Per-frame measures and their means. Infinite PSNRs are excluded from
/// `mean_psnr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub frame_count: usize,
    pub infinite_psnr_count: usize,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Self {
        let n = frames.len();
        let mean = |f: &dyn Fn(&FrameMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                frames.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let finite: Vec<f64> = frames.iter().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
        let mean_psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Self {
            mean_mse: mean(&|m| m.mse),
            mean_ssim: mean(&|m| m.ssim),
            mean_psnr,
            frame_count: n,
            infinite_psnr_count: n - finite.len(),
            frames,
        }
    }

    /// `frame_index,mse,psnr,ssim`, one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,mse,psnr,ssim\n");
        for (i, m) in self.frames.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", m.mse, m.psnr, m.ssim));
        }
        out
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            frame_count: self.frame_count,
            mean_mse: self.mean_mse,
            mean_psnr: self.mean_psnr,
            mean_ssim: self.mean_ssim,
            infinite_psnr_count: self.infinite_psnr_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub frame_count: usize,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub infinite_psnr_count: usize,
}

/// Scores `sequence[target]` against `sequence[target − 1]`.
pub fn copy_last_frame<T: Scalar>(sequence: &[Tensor<T>], target: usize, pix_max: f64) -> Result<FrameMetrics> {
    if sequence.len() < 2 || target == 0 || target >= sequence.len() {
        return Err(Error::Config(format!(
            "copy-last-frame needs target in 1..{} (got {target})",
            sequence.len()
        )));
    }
    compare(&sequence[target - 1], &sequence[target], pix_max)
}

/// Copy-last-frame baseline over many sequences, each scored at `target`.
pub fn copy_last_frame_baseline<'a, T: Scalar>(
    sequences: impl IntoIterator<Item = &'a [Tensor<T>]>,
    target: usize,
    pix_max: f64,
) -> Result<MetricReport> {
    let frames = sequences
        .into_iter()
        .map(|s| copy_last_frame(s, target, pix_max))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_frames(frames))
}
