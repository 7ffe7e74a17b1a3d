use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BoundConv, BoundLSTM, ConvLSTMWeights, ConvWeights};
use crate::precnet::config::{NetworkConfig, Variant};
use crate::tensor::{Scalar, Tensor};

/// Learnable parameters of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleWeights<T> {
    /// Top-down LSTM; in the single-LSTM variant, the module's only LSTM.
    pub down: ConvLSTMWeights<T>,
    /// Bottom-up LSTM (standard variant, below the top module).
    pub up: Option<ConvLSTMWeights<T>>,
    pub decoder: ConvWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T> {
    pub modules: Vec<ModuleWeights<T>>,
}

fn lstm_name(variant: Variant, which: &str) -> &str {
    match variant {
        Variant::SingleLstm => "lstm",
        Variant::Standard => which,
    }
}

impl<T: Scalar> NetworkWeights<T> {
    fn build(
        config: &NetworkConfig,
        mut lstm: impl FnMut(usize, usize, usize) -> ConvLSTMWeights<T>,
        mut conv: impl FnMut(usize, usize, usize) -> ConvWeights<T>,
    ) -> Result<Self> {
        config.validate()?;
        let modules = config
            .modules
            .iter()
            .enumerate()
            .map(|(l, m)| {
                let inputs = config.lstm_inputs(l);
                let (down, up) = match (config.variant, inputs.up) {
                    (Variant::Standard, Some(up)) => (
                        lstm(inputs.down, m.r_channels, m.lstm_kernel),
                        Some(lstm(up, m.r_channels, m.lstm_kernel)),
                    ),
                    (Variant::SingleLstm, Some(up)) => {
                        (lstm(inputs.down + up, m.r_channels, m.lstm_kernel), None)
                    }
                    (_, None) => (lstm(inputs.down, m.r_channels, m.lstm_kernel), None),
                };
                let decoder = conv(m.r_channels, m.a_channels, m.conv_kernel);
                ModuleWeights { down, up, decoder }
            })
            .collect();
        Ok(Self { modules })
    }

    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        Self::build(config, ConvLSTMWeights::zeros, ConvWeights::zeros)
    }

    /// Seeded uniform initialisation, see [`ConvLSTMWeights::init`].
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(seed));
        Self::build(
            config,
            |cin, ch, k| ConvLSTMWeights::init(cin, ch, k, &mut *rng.borrow_mut()),
            |cin, cout, k| ConvWeights::init(cin, cout, k, &mut *rng.borrow_mut()),
        )
    }

    /// Every parameter tensor with a stable dotted name, in binding order.
    pub fn named_tensors(&self, variant: Variant) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, m) in self.modules.iter().enumerate() {
            for (name, t) in m.down.tensors() {
                out.push((format!("m{l}.{}.{name}", lstm_name(variant, "down")), t));
            }
            if let Some(up) = &m.up {
                for (name, t) in up.tensors() {
                    out.push((format!("m{l}.up.{name}"), t));
                }
            }
            for (name, t) in m.decoder.tensors() {
                out.push((format!("m{l}.decoder.{name}"), t));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for m in &mut self.modules {
            out.extend(m.down.tensors_mut());
            if let Some(up) = &mut m.up {
                out.extend(up.tensors_mut());
            }
            out.extend(m.decoder.tensors_mut());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors(Variant::Standard)
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    /// Enumerated scalar count.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        let lstm = |w: &ConvLSTMWeights<T>| ConvLSTMWeights {
            in_channels: w.in_channels,
            hidden_channels: w.hidden_channels,
            kernel: w.kernel,
            w_x: std::array::from_fn(|g| w.w_x[g].cast()),
            w_h: std::array::from_fn(|g| w.w_h[g].cast()),
            b: std::array::from_fn(|g| w.b[g].cast()),
        };
        NetworkWeights {
            modules: self
                .modules
                .iter()
                .map(|m| ModuleWeights {
                    down: lstm(&m.down),
                    up: m.up.as_ref().map(lstm),
                    decoder: ConvWeights {
                        weight: m.decoder.weight.cast(),
                        bias: m.decoder.bias.cast(),
                    },
                })
                .collect(),
        }
    }

    /// Checks that tensor shapes agree with `config`.
    pub fn check_against(&self, config: &NetworkConfig) -> Result<()> {
        let expected = Self::zeros(config)?;
        let ours = self.named_tensors(config.variant);
        let theirs = expected.named_tensors(config.variant);
        if ours.len() != theirs.len() {
            return Err(Error::Config(format!(
                "weights hold {} tensors, config expects {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, config: &NetworkConfig, trainable: bool) -> Result<BoundNetwork> {
        let mut modules = Vec::with_capacity(self.modules.len());
        let mut leaves = Vec::new();
        for m in &self.modules {
            let down = m.down.bind(tape, trainable)?;
            leaves.extend_from_slice(&down.leaves);
            let up = match &m.up {
                Some(u) => {
                    let b = u.bind(tape, trainable)?;
                    leaves.extend_from_slice(&b.leaves);
                    Some(b)
                }
                None => None,
            };
            let decoder = m.decoder.bind(tape, trainable);
            leaves.extend_from_slice(&decoder.leaves());
            modules.push(BoundModule { down, up, decoder });
        }
        Ok(BoundNetwork {
            config: config.clone(),
            modules,
            leaves,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundModule {
    pub down: BoundLSTM,
    pub up: Option<BoundLSTM>,
    pub decoder: BoundConv,
}

/// Network parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    pub config: NetworkConfig,
    pub modules: Vec<BoundModule>,
    /// Leaf handles in [`NetworkWeights::named_tensors`] order.
    pub leaves: Vec<Var>,
}

/// Exact trainable parameter count of `config`.
pub fn count_parameters(config: &NetworkConfig) -> usize {
    config.count_parameters()
}
