//! Binary P6 pixmaps and the on-disk dataset layout
//! `root/<recording>/frame_XXXXXX.ppm` plus `root/manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FrameDims, Recording, SequenceDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

fn malformed(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Pixmap {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(self.path, start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(self.path, start, format!("{what} out of range")))
    }
}

/// Decodes an 8-bit P6 pixmap into a `[3, H, W]` frame scaled by 1/255.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(malformed(path, 0, "missing P6 magic"));
    }
    let mut r = HeaderReader { bytes, pos: 2, path };
    let width = r.number("width")?;
    let height = r.number("height")?;
    r.skip_space();
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(malformed(
            path,
            maxval_at,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(malformed(path, 2, "zero image dimension"));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(malformed(path, r.pos, "expected whitespace after maxval")),
    }
    let need = width * height * 3;
    let body = &bytes[r.pos..];
    if body.len() != need {
        return Err(malformed(
            path,
            r.pos,
            format!("pixel data has {} bytes, expected {need}", body.len()),
        ));
    }
    let plane = width * height;
    let mut data = vec![0f32; need];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` frame as P6, rounding to the nearest 1/255.
pub fn encode_ppm(frame: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_ppm", format!("frame {s:?} is not [3, H, W]")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(plane * 3);
    let d = frame.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let bytes = encode_ppm(frame)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub fps: Option<f64>,
    pub recordings: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub frames: usize,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

/// Writes every recording as a directory of P6 frames plus a manifest.
pub fn save_dataset(dataset: &SequenceDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for rec in &dataset.recordings {
        let dir = root.join(&rec.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, frame) in rec.frames.iter().enumerate() {
            write_ppm(&dir.join(frame_file_name(i)), frame)?;
        }
    }
    let manifest = DatasetManifest {
        channels: dataset.dims.channels,
        height: dataset.dims.height,
        width: dataset.dims.width,
        fps: dataset.fps,
        recordings: dataset
            .recordings
            .iter()
            .map(|r| ManifestEntry {
                name: r.name.clone(),
                frames: r.frames.len(),
            })
            .collect(),
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Keep every n-th frame (3 turns 30 fps footage into 10 fps).
    pub every_nth: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { every_nth: 1 }
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            path.is_file() && path.extension().is_some_and(|e| e == "ppm")
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_frames(root: &Path) -> Result<SequenceDataset> {
    load_frames_with(root, &LoadOptions::default())
}

/// Loads `root/<recording>/*.ppm`, recordings and frames in lexicographic order.
pub fn load_frames_with(root: &Path, opts: &LoadOptions) -> Result<SequenceDataset> {
    let step = opts.every_nth.max(1);
    let mut dims: Option<FrameDims> = None;
    let mut recordings = Vec::new();
    for dir in sorted_entries(root, true)? {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut frames = Vec::new();
        for path in sorted_entries(&dir, false)?.into_iter().step_by(step) {
            let frame = read_ppm(&path)?;
            let d = FrameDims {
                channels: frame.shape()[0],
                height: frame.shape()[1],
                width: frame.shape()[2],
            };
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Dataset(format!(
                        "{}: {}x{} frame differs from {}x{}",
                        path.display(),
                        d.height,
                        d.width,
                        prev.height,
                        prev.width
                    )));
                }
                Some(_) => {}
            }
            frames.push(frame);
        }
        recordings.push(Recording { name, frames });
    }
    let fps = fs::read_to_string(root.join(MANIFEST))
        .ok()
        .and_then(|s| serde_json::from_str::<DatasetManifest>(&s).ok())
        .and_then(|m| m.fps)
        .map(|f| f / step as f64);
    let dims = dims.ok_or_else(|| {
        Error::Dataset(format!("no P6 frames found under {}", root.display()))
    })?;
    SequenceDataset::new(dims, fps, recordings)
}
