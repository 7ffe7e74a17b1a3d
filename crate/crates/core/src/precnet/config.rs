use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvLSTMWeights, ConvWeights};

/// How each module's representation layer is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Separate top-down and bottom-up LSTMs sharing one (R, C) state.
    #[default]
    Standard,
    /// One LSTM per module fed the channel concatenation of both phase
    /// inputs, with the inactive input zero-filled.
    SingleLstm,
}

/// One hierarchy level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleConfig {
    /// ConvLSTM hidden channels.
    pub r_channels: usize,
    /// Decoder output channels.
    pub a_channels: usize,
    pub lstm_kernel: usize,
    pub conv_kernel: usize,
    /// Module loss weight.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub image_channels: usize,
    pub modules: Vec<ModuleConfig>,
    #[serde(default = "default_pix_max")]
    pub pix_max: f64,
    #[serde(default)]
    pub variant: Variant,
}

fn default_pix_max() -> f64 {
    1.0
}

/// Input channels of one module's LSTMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmInputs {
    /// Channels fed in the prediction (top-down) phase.
    pub down: usize,
    /// Channels fed in the correction (bottom-up) phase; `None` at the top.
    pub up: Option<usize>,
}

impl NetworkConfig {
    /// Builds a config with the decoder of level `l` predicting the image
    /// (`l = 0`) or the pooled representation of level `l − 1`.
    pub fn from_channels(image_channels: usize, r_channels: &[usize], lambda: &[f64]) -> Result<Self> {
        if r_channels.len() != lambda.len() {
            return Err(Error::Config(format!(
                "{} channel counts but {} lambda weights",
                r_channels.len(),
                lambda.len()
            )));
        }
        let modules = r_channels
            .iter()
            .zip(lambda)
            .enumerate()
            .map(|(l, (&r, &lam))| ModuleConfig {
                r_channels: r,
                a_channels: if l == 0 { image_channels } else { r_channels[l - 1] },
                lstm_kernel: 3,
                conv_kernel: 3,
                lambda: lam,
            })
            .collect();
        let config = Self {
            image_channels,
            modules,
            pix_max: 1.0,
            variant: Variant::Standard,
        };
        config.validate()?;
        Ok(config)
    }

    /// Three modules with 60/120/240 representation channels, 3×3 kernels,
    /// and only the bottom error in the loss.
    pub fn standard() -> Self {
        Self::from_channels(3, &[60, 120, 240], &[1.0, 0.0, 0.0]).expect("valid preset")
    }

    /// The standard layout with 20/40/80 channels.
    pub fn small() -> Self {
        Self::from_channels(3, &[20, 40, 80], &[1.0, 0.0, 0.0]).expect("valid preset")
    }

    pub fn single_lstm() -> Self {
        Self::standard().with_variant(Variant::SingleLstm)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "standard" | "default" => Some(Self::standard()),
            "small" => Some(Self::small()),
            "single_lstm" | "single-lstm" => Some(Self::single_lstm()),
            _ => None,
        }
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    /// Index of the top module, `N`.
    pub fn top(&self) -> usize {
        self.modules.len() - 1
    }

    /// Required divisor of input height and width, `2^N`.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.top()
    }

    /// Channels of `E_l`: twice the channels of the target it compares against.
    pub fn error_channels(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.image_channels
        } else {
            2 * self.modules[level - 1].r_channels
        }
    }

    pub fn lstm_inputs(&self, level: usize) -> LstmInputs {
        let top = self.top();
        if level == top {
            LstmInputs {
                down: self.error_channels(top),
                up: None,
            }
        } else {
            LstmInputs {
                down: self.error_channels(level + 1),
                up: Some(self.error_channels(level)),
            }
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.lambda).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules.len() < 2 {
            return Err(Error::Config(
                "at least two modules are required (N > 0)".into(),
            ));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        if !(self.pix_max.is_finite() && self.pix_max > 0.0) {
            return Err(Error::Config(format!("pix_max {} must be positive", self.pix_max)));
        }
        for (l, m) in self.modules.iter().enumerate() {
            let expected_a = if l == 0 {
                self.image_channels
            } else {
                self.modules[l - 1].r_channels
            };
            if m.a_channels != expected_a {
                return Err(Error::Config(format!(
                    "module {l}: a_channels {} must equal {expected_a}",
                    m.a_channels
                )));
            }
            if m.r_channels == 0 {
                return Err(Error::Config(format!("module {l}: r_channels must be positive")));
            }
            for (what, k) in [("lstm_kernel", m.lstm_kernel), ("conv_kernel", m.conv_kernel)] {
                if k % 2 == 0 {
                    return Err(Error::Config(format!("module {l}: {what} {k} must be odd")));
                }
            }
            if !m.lambda.is_finite() || m.lambda < 0.0 {
                return Err(Error::Config(format!("module {l}: lambda must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        let d = self.spatial_divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "frame size {height}x{width} must be divisible by {d}"
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn count_parameters(&self) -> usize {
        let mut total = 0;
        for (l, m) in self.modules.iter().enumerate() {
            let inputs = self.lstm_inputs(l);
            match (self.variant, inputs.up) {
                (Variant::Standard, Some(up)) => {
                    total += ConvLSTMWeights::<f32>::parameter_count(inputs.down, m.r_channels, m.lstm_kernel);
                    total += ConvLSTMWeights::<f32>::parameter_count(up, m.r_channels, m.lstm_kernel);
                }
                (Variant::SingleLstm, Some(up)) => {
                    total += ConvLSTMWeights::<f32>::parameter_count(
                        inputs.down + up,
                        m.r_channels,
                        m.lstm_kernel,
                    );
                }
                (_, None) => {
                    total += ConvLSTMWeights::<f32>::parameter_count(inputs.down, m.r_channels, m.lstm_kernel);
                }
            }
            total += ConvWeights::<f32>::parameter_count(m.r_channels, m.a_channels, m.conv_kernel);
        }
        total
    }
}
