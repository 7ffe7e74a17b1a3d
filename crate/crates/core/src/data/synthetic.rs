//! Bouncing-shapes video generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FrameDims, Recording, SequenceDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disc,
}

/// A square-bounded shape moving at constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Top-left corner of the bounding box, in pixels.
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Side length (rectangle) or diameter (disc).
    pub size: f64,
    pub color: [f32; 3],
}

impl Shape {
    fn covers(&self, px: usize, py: usize) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        match self.kind {
            ShapeKind::Rectangle => {
                cx >= self.x && cx < self.x + self.size && cy >= self.y && cy < self.y + self.size
            }
            ShapeKind::Disc => {
                let r = self.size / 2.0;
                let (dx, dy) = (cx - (self.x + r), cy - (self.y + r));
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, upper: f64) {
    *pos += *vel;
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    } else if *pos > upper {
        *pos = 2.0 * upper - *pos;
        *vel = -*vel;
    }
}

/// Shapes on a uniform canvas; later shapes are painted over earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: f32,
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// Renders a `[3, H, W]` frame.
    pub fn render(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut frame = Tensor::full(&[3, h, w], self.background);
        let data = frame.data_mut();
        for shape in &self.shapes {
            for py in 0..h {
                for px in 0..w {
                    if shape.covers(px, py) {
                        for (c, &v) in shape.color.iter().enumerate() {
                            data[(c * h + py) * w + px] = v;
                        }
                    }
                }
            }
        }
        frame
    }

    /// Moves every shape one frame, reflecting off the borders.
    pub fn advance(&mut self) {
        for s in &mut self.shapes {
            reflect(&mut s.x, &mut s.vx, self.width as f64 - s.size);
            reflect(&mut s.y, &mut s.vy, self.height as f64 - s.size);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub shape_count: usize,
    pub kinds: Vec<ShapeKind>,
    /// Inclusive side/diameter range in pixels.
    pub size_range: (usize, usize),
    /// Per-axis speed magnitude range in pixels per frame; sign is random.
    pub speed_range: (f64, f64),
    /// Canvas sides must be multiples of this (`2^N` of the target network).
    pub divisor: usize,
    /// Canvas grey level in `[0, 1]`.
    pub background: f32,
    /// Inclusive per-channel shape colour range.
    pub color_range: (f32, f32),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            shape_count: 2,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Disc],
            size_range: (6, 10),
            speed_range: (1.0, 2.0),
            divisor: 4,
            background: 0.3,
            color_range: (0.6, 1.0),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.divisor.max(1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(d) || !self.width.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "canvas {}x{} must be a positive multiple of {d}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid size range {lo}..={hi}")));
        }
        if hi > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "shapes up to {hi}px do not fit a {}x{} canvas",
                self.height, self.width
            )));
        }
        let (smin, smax) = self.speed_range;
        if !(smin >= 0.0 && smin <= smax && smax.is_finite()) {
            return Err(Error::Config(format!("invalid speed range {smin}..{smax}")));
        }
        let (cmin, cmax) = self.color_range;
        if !(0.0..=1.0).contains(&self.background) || !(0.0 <= cmin && cmin <= cmax && cmax <= 1.0) {
            return Err(Error::Config(format!(
                "background {} and colour range {cmin}..={cmax} must lie in [0, 1]",
                self.background
            )));
        }
        if self.shape_count > 0 && self.kinds.is_empty() {
            return Err(Error::Config("no shape kinds given".into()));
        }
        Ok(())
    }

    /// Random initial scene for sequence `index`.
    pub fn scene(&self, index: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let (smin, smax) = self.speed_range;
        let shapes = (0..self.shape_count)
            .map(|_| {
                let kind = self.kinds[rng.gen_range(0..self.kinds.len())];
                let size = rng.gen_range(self.size_range.0..=self.size_range.1);
                let x = rng.gen_range(0..=self.width - size) as f64;
                let y = rng.gen_range(0..=self.height - size) as f64;
                let mut speed = || {
                    let mag = if smax > smin { rng.gen_range(smin..=smax) } else { smin };
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                };
                let (vx, vy) = (speed(), speed());
                let color = std::array::from_fn(|_| rng.gen_range(self.color_range.0..=self.color_range.1));
                Shape {
                    kind,
                    x,
                    y,
                    vx,
                    vy,
                    size: size as f64,
                    color,
                }
            })
            .collect();
        Scene {
            height: self.height,
            width: self.width,
            background: self.background,
            shapes,
        }
    }
}

/// `n_sequences` recordings of `length` frames each, deterministic in the seed.
pub fn generate_synthetic(spec: &SyntheticSpec, n_sequences: usize, length: usize) -> Result<SequenceDataset> {
    spec.validate()?;
    let recordings = (0..n_sequences)
        .map(|i| {
            let mut scene = spec.scene(i as u64);
            let mut frames = Vec::with_capacity(length);
            for _ in 0..length {
                frames.push(scene.render());
                scene.advance();
            }
            Recording {
                name: format!("recording_{i:04}"),
                frames,
            }
        })
        .collect();
    SequenceDataset::new(
        FrameDims {
            channels: 3,
            height: spec.height,
            width: spec.width,
        },
        None,
        recordings,
    )
}
