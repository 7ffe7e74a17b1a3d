//! Sequence loss, Adam, learning-rate schedule and the epoch loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{slice_sequences, SequenceDataset, Window};
use crate::error::{Error, Result};
use crate::precnet::{BoundNetwork, NetworkConfig, NetworkState, NetworkWeights};
use crate::tensor::{Scalar, Tensor};

/// Per-timestep weights: the prediction made before any frame is seen gets
/// 0, the remaining `seq_len − 1` predictions share weight 1 equally.
pub fn time_weights(seq_len: usize) -> Result<Vec<f64>> {
    if seq_len < 2 {
        return Err(Error::Config(format!(
            "sequence length must be at least 2, got {seq_len}"
        )));
    }
    let w = 1.0 / (seq_len - 1) as f64;
    Ok((0..seq_len).map(|t| if t == 0 { 0.0 } else { w }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// `μ_t`, one per frame.
    pub time: Vec<f64>,
    /// `λ_l`, one per module.
    pub module: Vec<f64>,
}

impl LossWeights {
    pub fn new(config: &NetworkConfig, seq_len: usize) -> Result<Self> {
        Ok(Self {
            time: time_weights(seq_len)?,
            module: config.lambdas(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    /// Scalar loss, averaged over the batch.
    pub loss: Var,
    /// `Â_0^t` for every `t`.
    pub predictions: Vec<Var>,
}

/// Runs the network over `frames` (each `[B, C, H, W]`) from a zero state and
/// accumulates `Σ_t μ_t Σ_l λ_l · mean(E_l^t)`. Zero-weight terms are skipped.
pub fn sequence_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundNetwork,
    frames: &[Var],
    weights: &LossWeights,
) -> Result<SequenceOutput> {
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "sequence length must be at least 2, got {}",
            frames.len()
        )));
    }
    if weights.time.len() != frames.len() || weights.module.len() != bound.config.module_count() {
        return Err(Error::Config(format!(
            "loss weights ({} times, {} modules) do not match {} frames and {} modules",
            weights.time.len(),
            weights.module.len(),
            frames.len(),
            bound.config.module_count()
        )));
    }
    let s = tape.shape(frames[0]).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("sequence_loss", format!("frame {s:?} is not [B, C, H, W]")));
    }
    let mut state = NetworkState::<T>::zeros(&bound.config, s[0], s[2], s[3])?.bind(tape);
    let mut loss: Option<Var> = None;
    let mut predictions = Vec::with_capacity(frames.len());
    for (t, &frame) in frames.iter().enumerate() {
        let (pred, next) = bound.step(tape, &state, frame)?;
        predictions.push(pred);
        let mu = weights.time[t];
        if mu != 0.0 {
            for (l, &lambda) in weights.module.iter().enumerate() {
                if lambda == 0.0 {
                    continue;
                }
                let m = tape.mean(next.e[l]);
                let term = tape.scale(m, mu * lambda);
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
        }
        state = next;
    }
    let loss = match loss {
        Some(l) => l,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    Ok(SequenceOutput { loss, predictions })
}

fn bind_frames<T: Scalar>(tape: &mut Tape<T>, frames: &[Tensor<T>]) -> Vec<Var> {
    frames.iter().map(|f| tape.constant(f.clone())).collect()
}

/// Loss value without gradient tracking.
pub fn sequence_loss<T: Scalar>(
    config: &NetworkConfig,
    weights: &NetworkWeights<T>,
    frames: &[Tensor<T>],
    loss_weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, config, false)?;
    let vars = bind_frames(&mut tape, frames);
    let out = sequence_loss_on_tape(&mut tape, &bound, &vars, loss_weights)?;
    Ok(tape.value(out.loss).data()[0].as_f64())
}

/// Loss and its gradient for every parameter tensor, in
/// [`NetworkWeights::tensors`] order. Parameters without a path to the loss
/// get a zero gradient.
pub fn loss_and_gradients<T: Scalar>(
    config: &NetworkConfig,
    weights: &NetworkWeights<T>,
    frames: &[Tensor<T>],
    loss_weights: &LossWeights,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, config, true)?;
    let vars = bind_frames(&mut tape, frames);
    let out = sequence_loss_on_tape(&mut tape, &bound, &vars, loss_weights)?;
    let loss = tape.value(out.loss).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    if tape.requires_grad(out.loss) {
        tape.backward(out.loss)?;
    }
    let grads = bound
        .leaves
        .iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)),
        })
        .collect::<Vec<_>>();
    if !grads.iter().all(Tensor::all_finite) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments mirror the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} params and {} grads for {} moment tensors",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "tensor {i}: param {:?}, grad {:?}, moments {:?}",
                        p.shape(),
                        g.shape(),
                        self.m[i].shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                let gj = gj.as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                p[j] = T::from_f64_lossy(p[j].as_f64() - update);
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            config: self.config,
            step: self.step,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    /// First epoch (0-based) at which `lr` applies.
    pub epoch: usize,
    pub lr: f64,
}

/// Piecewise-constant learning rate by epoch index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub breakpoints: Vec<Breakpoint>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            breakpoints: vec![Breakpoint { epoch: 0, lr }],
        }
    }

    /// 1e-3, dropping to 1e-4 for the final tenth of `epochs`.
    pub fn step_decay(epochs: usize) -> Self {
        let drop_at = epochs - epochs / 10;
        let mut breakpoints = vec![Breakpoint { epoch: 0, lr: 1e-3 }];
        if drop_at < epochs {
            breakpoints.push(Breakpoint {
                epoch: drop_at,
                lr: 1e-4,
            });
        }
        Self { breakpoints }
    }

    pub fn validate(&self) -> Result<()> {
        match self.breakpoints.first() {
            Some(b) if b.epoch == 0 => {}
            _ => return Err(Error::Config("schedule must start at epoch 0".into())),
        }
        if self.breakpoints.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(Error::Config("schedule epochs must be strictly increasing".into()));
        }
        if self.breakpoints.iter().any(|b| !(b.lr > 0.0 && b.lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.breakpoints
            .iter()
            .take_while(|b| b.epoch <= epoch)
            .last()
            .map_or(0.0, |b| b.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub epochs: usize,
    pub sequences_per_epoch: usize,
    pub batch_size: usize,
    pub val_sequences: usize,
    /// Frame step between consecutive training windows.
    pub stride: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// `None` means [`LrSchedule::step_decay`] over `epochs`.
    pub schedule: Option<LrSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 10,
            epochs: 10,
            sequences_per_epoch: 500,
            batch_size: 4,
            val_sequences: 100,
            stride: 1,
            seed: 0,
            adam: AdamConfig::default(),
            schedule: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        time_weights(self.seq_len)?;
        if self.batch_size == 0 || self.sequences_per_epoch == 0 || self.stride == 0 {
            return Err(Error::Config(
                "batch_size, sequences_per_epoch and stride must be positive".into(),
            ));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule
            .clone()
            .unwrap_or_else(|| LrSchedule::step_decay(self.epochs))
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sequences_per_epoch.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_completed: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// Mini-batch loss of every optimizer step so far.
    pub step_losses: Vec<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!("{},{},{val}\n", r.epoch, r.train_loss));
    }
    out
}

fn sample<R: Rng>(rng: &mut R, windows: &[Window], count: usize) -> Vec<Window> {
    (0..count).map(|_| windows[rng.gen_range(0..windows.len())]).collect()
}

/// Seeded generator for one epoch; training and validation draw from
/// separate streams. Stream 0 is left to weight initialisation.
fn epoch_rng(seed: u64, epoch: usize, validation: bool) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + 1 + validation as u64);
    rng
}

/// Mini-batch training with per-epoch sampling with replacement.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: NetworkConfig,
    pub train: TrainConfig,
    pub weights: NetworkWeights<T>,
    pub adam: AdamState<T>,
    pub progress: TrainProgress,
    loss_weights: LossWeights,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: NetworkConfig, train: TrainConfig, weights: NetworkWeights<T>) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        weights.check_against(&config)?;
        let adam = AdamState::new(&weights.tensors(), train.adam);
        let progress = TrainProgress {
            epochs_completed: 0,
            seed: train.seed,
            history: Vec::new(),
            step_losses: Vec::new(),
        };
        Self::resume(config, train, weights, adam, progress)
    }

    /// Continues from saved optimizer state and progress.
    pub fn resume(
        config: NetworkConfig,
        train: TrainConfig,
        weights: NetworkWeights<T>,
        adam: AdamState<T>,
        progress: TrainProgress,
    ) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        weights.check_against(&config)?;
        let shapes_match = adam.m.len() == weights.tensors().len()
            && adam
                .m
                .iter()
                .zip(&adam.v)
                .zip(weights.tensors())
                .all(|((m, v), p)| m.shape() == p.shape() && v.shape() == p.shape());
        if !shapes_match {
            return Err(Error::Config("optimizer moments do not match the weights".into()));
        }
        let loss_weights = LossWeights::new(&config, train.seq_len)?;
        Ok(Self {
            config,
            train,
            weights,
            adam,
            progress,
            loss_weights,
        })
    }

    pub fn loss_weights(&self) -> &LossWeights {
        &self.loss_weights
    }

    /// One Adam update on a batch of `[B, C, H, W]` frames.
    pub fn step_on(&mut self, frames: &[Tensor<T>], lr: f64) -> Result<f64> {
        let (loss, grads) = loss_and_gradients(&self.config, &self.weights, frames, &self.loss_weights)?;
        self.adam.update(self.weights.tensors_mut(), &grads, lr)?;
        self.progress.step_losses.push(loss);
        Ok(loss)
    }

    fn windows(&self, ds: &SequenceDataset) -> Result<Vec<Window>> {
        self.config.check_spatial(ds.dims.height, ds.dims.width)?;
        if ds.dims.channels != self.config.image_channels {
            return Err(Error::Dataset(format!(
                "dataset has {} channels, network expects {}",
                ds.dims.channels, self.config.image_channels
            )));
        }
        Ok(slice_sequences(ds, self.train.seq_len, self.train.stride)?.windows)
    }

    /// Mean loss over `count` windows sampled from `windows`.
    fn validation_loss(&self, ds: &SequenceDataset, windows: &[Window], epoch: usize) -> Result<Option<f64>> {
        if windows.is_empty() || self.train.val_sequences == 0 {
            return Ok(None);
        }
        let mut rng = epoch_rng(self.progress.seed, epoch, true);
        let picked = sample(&mut rng, windows, self.train.val_sequences);
        let mut total = 0.0;
        for chunk in picked.chunks(self.train.batch_size) {
            let frames = ds.batch::<T>(chunk)?;
            total += sequence_loss(&self.config, &self.weights, &frames, &self.loss_weights)? * chunk.len() as f64;
        }
        Ok(Some(total / picked.len() as f64))
    }

    /// Trains until `train.epochs` epochs are complete, calling `on_epoch`
    /// after each.
    pub fn fit(
        &mut self,
        train_ds: &SequenceDataset,
        val_ds: Option<&SequenceDataset>,
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        let train_windows = self.windows(train_ds)?;
        if train_windows.is_empty() {
            return Err(Error::Dataset(format!(
                "no training sequences of length {}",
                self.train.seq_len
            )));
        }
        let val_windows = match val_ds {
            Some(ds) => self.windows(ds)?,
            None => Vec::new(),
        };
        let schedule = self.train.schedule();
        while self.progress.epochs_completed < self.train.epochs {
            let epoch = self.progress.epochs_completed;
            let lr = schedule.lr(epoch);
            let mut rng = epoch_rng(self.progress.seed, epoch, false);
            let picked = sample(&mut rng, &train_windows, self.train.sequences_per_epoch);
            let mut total = 0.0;
            for chunk in picked.chunks(self.train.batch_size) {
                let frames = train_ds.batch::<T>(chunk)?;
                total += self.step_on(&frames, lr)? * chunk.len() as f64;
            }
            let val_loss = match val_ds {
                Some(ds) => self.validation_loss(ds, &val_windows, epoch)?,
                None => None,
            };
            let record = EpochRecord {
                epoch,
                train_loss: total / picked.len() as f64,
                val_loss,
                lr,
            };
            self.progress.history.push(record.clone());
            self.progress.epochs_completed += 1;
            on_epoch(self, &record)?;
        }
        Ok(())
    }
}
