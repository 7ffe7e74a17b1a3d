//! Frame-sequence datasets: synthetic generation, P6 pixmap ingestion and
//! windowing into fixed-length training/evaluation sequences.

pub mod ppm;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use ppm::{load_frames, load_frames_with, save_dataset, LoadOptions};
pub use synthetic::{generate_synthetic, Scene, Shape, ShapeKind, SyntheticSpec};

/// One recording: an ordered list of `[C, H, W]` frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub dims: FrameDims,
    pub fps: Option<f64>,
    pub recordings: Vec<Recording>,
}

impl SequenceDataset {
    pub fn new(dims: FrameDims, fps: Option<f64>, recordings: Vec<Recording>) -> Result<Self> {
        let ds = Self {
            dims,
            fps,
            recordings,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let want = [self.dims.channels, self.dims.height, self.dims.width];
        for rec in &self.recordings {
            for (i, f) in rec.frames.iter().enumerate() {
                if f.shape() != want {
                    return Err(Error::Dataset(format!(
                        "recording {} frame {i}: shape {:?}, expected {want:?}",
                        rec.name,
                        f.shape()
                    )));
                }
                if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Dataset(format!(
                        "recording {} frame {i}: pixel outside [0, 1]",
                        rec.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.recordings.iter().map(|r| r.frames.len()).sum()
    }

    /// Splits off the last `count` recordings (at least one stays behind).
    pub fn split_tail(mut self, count: usize) -> (Self, Self) {
        let keep = self.recordings.len().saturating_sub(count).max(1).min(self.recordings.len());
        let tail = self.recordings.split_off(keep);
        let other = Self {
            dims: self.dims,
            fps: self.fps,
            recordings: tail,
        };
        (self, other)
    }

    pub fn window_frames(&self, w: &Window) -> &[Tensor<f32>] {
        &self.recordings[w.recording].frames[w.start..w.start + w.len]
    }

    /// Stacks windows into per-timestep `[B, C, H, W]` tensors.
    pub fn batch<T: Scalar>(&self, windows: &[Window]) -> Result<Vec<Tensor<T>>> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Dataset("empty batch".into()))?;
        if windows.iter().any(|w| w.len != first.len) {
            return Err(Error::Dataset("windows in a batch differ in length".into()));
        }
        (0..first.len)
            .map(|t| {
                let frames: Vec<&Tensor<f32>> = windows
                    .iter()
                    .map(|w| &self.recordings[w.recording].frames[w.start + t])
                    .collect();
                Ok(Tensor::stack(&frames)?.cast())
            })
            .collect()
    }
}

/// A contiguous run of `len` frames inside one recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub recording: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Windows {
    pub windows: Vec<Window>,
    /// Recordings shorter than the window length.
    pub skipped_recordings: usize,
}

impl Windows {
    pub fn iter(&self) -> std::slice::Iter<'_, Window> {
        self.windows.iter()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

impl<'a> IntoIterator for &'a Windows {
    type Item = &'a Window;
    type IntoIter = std::slice::Iter<'a, Window>;

    fn into_iter(self) -> Self::IntoIter {
        self.windows.iter()
    }
}

/// Length-`len` windows every `stride` frames, never crossing a recording
/// boundary. `stride == len` gives non-overlapping splits.
pub fn slice_sequences(dataset: &SequenceDataset, len: usize, stride: usize) -> Result<Windows> {
    if len == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    let mut windows = Vec::new();
    let mut skipped_recordings = 0;
    for (r, rec) in dataset.recordings.iter().enumerate() {
        let n = rec.frames.len();
        if n < len {
            skipped_recordings += 1;
            continue;
        }
        windows.extend((0..=n - len).step_by(stride).map(|start| Window {
            recording: r,
            start,
            len,
        }));
    }
    Ok(Windows {
        windows,
        skipped_recordings,
    })
}
