//! The TOML training file.

use std::path::{Path, PathBuf};

use precoder::training::TrainConfig;
use precoder::{Error, NetworkConfig, Result, Variant};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Either a named preset or explicit per-module channels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub preset: Option<String>,
    pub r_channels: Option<Vec<usize>>,
    /// Loss weight per module; defaults to 1 for the bottom module, 0 above.
    pub lambda: Option<Vec<f64>>,
    pub image_channels: Option<usize>,
    pub variant: Option<Variant>,
    pub pix_max: Option<f64>,
}

impl NetworkSpec {
    pub fn resolve(&self) -> Result<NetworkConfig> {
        let mut config = match (&self.preset, &self.r_channels) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either network.preset or network.r_channels, not both".into(),
                ))
            }
            (Some(name), None) => NetworkConfig::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?,
            (None, Some(r)) => {
                let lambda = match &self.lambda {
                    Some(l) => l.clone(),
                    None => (0..r.len()).map(|l| if l == 0 { 1.0 } else { 0.0 }).collect(),
                };
                NetworkConfig::from_channels(self.image_channels.unwrap_or(3), r, &lambda)?
            }
            (None, None) => {
                return Err(Error::Config(
                    "network needs a preset or r_channels".into(),
                ))
            }
        };
        if self.preset.is_some() {
            if let Some(lambda) = &self.lambda {
                if lambda.len() != config.module_count() {
                    return Err(Error::Config(format!(
                        "{} lambda weights for {} modules",
                        lambda.len(),
                        config.module_count()
                    )));
                }
                for (m, &l) in config.modules.iter_mut().zip(lambda) {
                    m.lambda = l;
                }
            }
        }
        if let Some(v) = self.variant {
            config.variant = v;
        }
        if let Some(p) = self.pix_max {
            config.pix_max = p;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    /// Directory in the `recording_XXXX/frame_XXXXXX.ppm` layout.
    pub dataset: PathBuf,
    /// Separate validation directory; otherwise `val_recordings` are split
    /// off the end of `dataset`.
    pub val_dataset: Option<PathBuf>,
    #[serde(default)]
    pub val_recordings: usize,
    pub network: NetworkSpec,
    #[serde(default)]
    pub training: TrainConfig,
    pub precision: Option<Precision>,
}

impl TrainFile {
    /// Parses `path`; relative dataset paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut file: TrainFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        file.dataset = base.join(&file.dataset);
        file.val_dataset = file.val_dataset.map(|p| base.join(p));
        Ok(file)
    }
}
