//! Next-frame and multi-step (closed-loop) evaluation over dataset windows.

use serde::{Deserialize, Serialize};

use crate::data::{slice_sequences, SequenceDataset, Window};
use crate::error::{Error, Result};
use crate::metrics::{compare, copy_last_frame, FrameMetrics, MetricReport, MetricSummary};
use crate::precnet::Network;
use crate::tensor::{Scalar, Tensor};

/// Frames fed before the scored prediction.
pub const DEFAULT_CONTEXT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub windows: Vec<Window>,
    pub model: MetricReport,
    pub baseline: MetricReport,
}

impl EvalReport {
    /// `frame_index,mse,psnr,ssim,baseline_mse,baseline_psnr,baseline_ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,mse,psnr,ssim,baseline_mse,baseline_psnr,baseline_ssim\n");
        for (i, (m, b)) in self.model.frames.iter().zip(&self.baseline.frames).enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                m.mse, m.psnr, m.ssim, b.mse, b.psnr, b.ssim
            ));
        }
        out
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            model: self.model.summary(),
            baseline: self.baseline.summary(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: MetricSummary,
    pub baseline: MetricSummary,
}

fn check_dataset<T: Scalar>(net: &Network<T>, ds: &SequenceDataset) -> Result<()> {
    net.config.check_spatial(ds.dims.height, ds.dims.width)?;
    if ds.dims.channels != net.config.image_channels {
        return Err(Error::Dataset(format!(
            "dataset has {} channels, network expects {}",
            ds.dims.channels, net.config.image_channels
        )));
    }
    Ok(())
}

fn non_empty(windows: &[Window], len: usize) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::Dataset(format!("no recording holds {len} frames")));
    }
    Ok(())
}

/// Non-overlapping windows of `context + 1` frames; the prediction of the
/// last frame (made after seeing `context` frames) is scored, alongside the
/// copy-last-frame baseline.
pub fn evaluate_next_frame<T: Scalar>(
    net: &Network<T>,
    ds: &SequenceDataset,
    context: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    let len = context + 1;
    let windows = slice_sequences(ds, len, len)?.windows;
    evaluate_windows(net, ds, &windows, context, batch_size)
}

/// Scores the prediction of frame `context` in every window.
pub fn evaluate_windows<T: Scalar>(
    net: &Network<T>,
    ds: &SequenceDataset,
    windows: &[Window],
    context: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    check_dataset(net, ds)?;
    non_empty(windows, context + 1)?;
    if context == 0 || windows.iter().any(|w| w.len <= context) {
        return Err(Error::Config(format!(
            "context {context} needs windows longer than it and at least 1"
        )));
    }
    let pix_max = net.config.pix_max;
    let mut model = Vec::with_capacity(windows.len());
    let mut baseline = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let frames = ds.batch::<T>(chunk)?;
        let preds = net.predict_sequence(&frames[..=context])?;
        let last = &preds[context];
        for (b, w) in chunk.iter().enumerate() {
            let target = frames[context].index_first(b)?;
            model.push(compare(&last.index_first(b)?, &target, pix_max)?);
            baseline.push(copy_last_frame(ds.window_frames(w), context, pix_max)?);
        }
    }
    Ok(EvalReport {
        windows: windows.to_vec(),
        model: MetricReport::from_frames(model),
        baseline: MetricReport::from_frames(baseline),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub windows: Vec<Window>,
    /// Index `T − 1` holds the metrics of the `T`-step-ahead predictions.
    pub per_horizon: Vec<MetricReport>,
    /// Largest `|E_0|` seen during the closed-loop phase.
    pub closed_loop_e0_max: f64,
}

impl RolloutReport {
    /// `horizon,count,mean_mse,mean_psnr,mean_ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,count,mean_mse,mean_psnr,mean_ssim\n");
        for (i, r) in self.per_horizon.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                r.frame_count,
                r.mean_mse,
                r.mean_psnr,
                r.mean_ssim
            ));
        }
        out
    }
}

/// Non-overlapping windows of `context + horizon` frames: feeds `context`
/// frames, then predicts `horizon` frames closed-loop. `sink` receives every
/// predicted frame as `(window, T, [C, H, W] frame)`.
pub fn evaluate_rollout<T: Scalar>(
    net: &Network<T>,
    ds: &SequenceDataset,
    context: usize,
    horizon: usize,
    batch_size: usize,
    sink: impl FnMut(&Window, usize, &Tensor<f32>) -> Result<()>,
) -> Result<RolloutReport> {
    let len = context + horizon;
    let windows = slice_sequences(ds, len, len)?.windows;
    rollout_windows(net, ds, &windows, context, horizon, batch_size, sink)
}

pub fn rollout_windows<T: Scalar>(
    net: &Network<T>,
    ds: &SequenceDataset,
    windows: &[Window],
    context: usize,
    horizon: usize,
    batch_size: usize,
    mut sink: impl FnMut(&Window, usize, &Tensor<f32>) -> Result<()>,
) -> Result<RolloutReport> {
    check_dataset(net, ds)?;
    non_empty(windows, context + horizon)?;
    if context == 0 || horizon == 0 || windows.iter().any(|w| w.len < context + horizon) {
        return Err(Error::Config(format!(
            "windows must hold context {context} ≥ 1 plus horizon {horizon} ≥ 1 frames"
        )));
    }
    let pix_max = net.config.pix_max;
    let mut per_horizon: Vec<Vec<FrameMetrics>> = vec![Vec::new(); horizon];
    let mut e0_max = 0.0f64;
    for chunk in windows.chunks(batch_size.max(1)) {
        let frames = ds.batch::<T>(chunk)?;
        let s = frames[0].shape();
        let state = net.init_state(s[0], s[2], s[3])?;
        let rollout = net.rollout_with(&state, &frames[..context], horizon, |_, st| {
            let m = st.e[0].data().iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
            e0_max = e0_max.max(m);
        })?;
        for (k, pred) in rollout.predictions.iter().enumerate() {
            let target = &frames[context + k];
            for (b, w) in chunk.iter().enumerate() {
                let p = pred.index_first(b)?;
                per_horizon[k].push(compare(&p, &target.index_first(b)?, pix_max)?);
                sink(w, k + 1, &p.cast())?;
            }
        }
    }
    Ok(RolloutReport {
        windows: windows.to_vec(),
        per_horizon: per_horizon.into_iter().map(MetricReport::from_frames).collect(),
        closed_loop_e0_max: e0_max,
    })
}
