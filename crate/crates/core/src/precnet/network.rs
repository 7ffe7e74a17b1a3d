//! Per-timestep state update: a top-down prediction phase followed by a
//! bottom-up correction phase.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{convlstm_step, decoder, error_units, BoundLSTM, ConvLSTMState};
use crate::precnet::config::{NetworkConfig, Variant};
use crate::precnet::weights::{BoundNetwork, NetworkWeights};
use crate::tensor::{Scalar, Tensor};

/// Per-module hidden (`R_l`), cell (`C_l`) and error (`E_l`) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T> {
    pub r: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
    pub e: Vec<Tensor<T>>,
}

impl<T: Scalar> NetworkState<T> {
    /// All-zero state for frames of size `height × width`.
    pub fn zeros(config: &NetworkConfig, batch: usize, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        config.check_spatial(height, width)?;
        let mut r = Vec::new();
        let mut c = Vec::new();
        let mut e = Vec::new();
        for (l, m) in config.modules.iter().enumerate() {
            let (h, w) = (height >> l, width >> l);
            r.push(Tensor::zeros(&[batch, m.r_channels, h, w]));
            c.push(Tensor::zeros(&[batch, m.r_channels, h, w]));
            e.push(Tensor::zeros(&[batch, config.error_channels(l), h, w]));
        }
        Ok(Self { r, c, e })
    }

    pub fn batch(&self) -> usize {
        self.r[0].shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> StateVars {
        let mut lift = |ts: &[Tensor<T>]| ts.iter().map(|t| tape.constant(t.clone())).collect();
        StateVars {
            r: lift(&self.r),
            c: lift(&self.c),
            e: lift(&self.e),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.r
            .iter()
            .chain(&self.c)
            .chain(&self.e)
            .all(Tensor::all_finite)
    }
}

/// [`NetworkState`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct StateVars {
    pub r: Vec<Var>,
    pub c: Vec<Var>,
    pub e: Vec<Var>,
}

impl StateVars {
    pub fn read<T: Scalar>(&self, tape: &Tape<T>) -> NetworkState<T> {
        let get = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        NetworkState {
            r: get(&self.r),
            c: get(&self.c),
            e: get(&self.e),
        }
    }

    fn check_finite<T: Scalar>(&self, tape: &Tape<T>) -> Result<()> {
        let groups = [("R", &self.r), ("C", &self.c), ("E", &self.e)];
        for (name, vars) in groups {
            for (l, &v) in vars.iter().enumerate() {
                if !tape.value(v).all_finite() {
                    return Err(Error::NonFinite(format!("state {name}_{l}")));
                }
            }
        }
        Ok(())
    }
}

/// Result of the prediction phase at time `t`.
#[derive(Debug, Clone)]
pub struct Predicted {
    /// Bottom prediction `Â_0`, clamped to `[0, pix_max]`.
    pub frame: Var,
    /// `Â_l` for every level.
    pub a_hat: Vec<Var>,
    /// Updated `R`, `C` and `E_l` for `l ≥ 1`; `e[0]` still holds `E_0^{t−1}`.
    pub state: StateVars,
}

fn zeros_like_spatial<T: Scalar>(tape: &mut Tape<T>, like: Var, channels: usize) -> Var {
    let s = tape.shape(like);
    let shape = [s[0], channels, s[2], s[3]];
    tape.constant(Tensor::zeros(&shape))
}

impl BoundNetwork {
    fn check_state<T: Scalar>(&self, tape: &Tape<T>, state: &StateVars) -> Result<()> {
        let n = self.config.module_count();
        if state.r.len() != n || state.c.len() != n || state.e.len() != n {
            return Err(Error::shape(
                "step",
                format!("state has {} levels, config has {n}", state.r.len()),
            ));
        }
        let base = tape.shape(state.r[0]).to_vec();
        if base.len() != 4 {
            return Err(Error::shape("step", format!("R_0 has shape {base:?}")));
        }
        for (l, m) in self.config.modules.iter().enumerate() {
            let expect = [base[0], m.r_channels, base[2] >> l, base[3] >> l];
            let expect_e = [base[0], self.config.error_channels(l), expect[2], expect[3]];
            if tape.shape(state.r[l]) != expect
                || tape.shape(state.c[l]) != expect
                || tape.shape(state.e[l]) != expect_e
            {
                return Err(Error::shape(
                    "step",
                    format!(
                        "level {l}: R {:?} C {:?} E {:?}, expected R/C {expect:?} E {expect_e:?}",
                        tape.shape(state.r[l]),
                        tape.shape(state.c[l]),
                        tape.shape(state.e[l])
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Runs the module's prediction-phase LSTM on `input`.
    fn lstm_down<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        level: usize,
        state: ConvLSTMState,
        input: Var,
    ) -> Result<ConvLSTMState> {
        let module = &self.modules[level];
        let input = match (self.config.variant, self.config.lstm_inputs(level).up) {
            (Variant::SingleLstm, Some(up)) => {
                let zeros = zeros_like_spatial(tape, input, up);
                tape.concat_channels(input, zeros)?
            }
            _ => input,
        };
        convlstm_step(tape, &module.down, state, input)
    }

    /// Runs the module's correction-phase LSTM on `error`.
    fn lstm_up<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        level: usize,
        state: ConvLSTMState,
        error: Var,
    ) -> Result<ConvLSTMState> {
        let module = &self.modules[level];
        match self.config.variant {
            Variant::Standard => {
                let lstm: &BoundLSTM = module.up.as_ref().ok_or_else(|| {
                    Error::Config(format!("module {level} has no bottom-up LSTM"))
                })?;
                convlstm_step(tape, lstm, state, error)
            }
            Variant::SingleLstm => {
                let down = self.config.lstm_inputs(level).down;
                let zeros = zeros_like_spatial(tape, error, down);
                let input = tape.concat_channels(zeros, error)?;
                convlstm_step(tape, &module.down, state, input)
            }
        }
    }

    /// Prediction phase, levels `N` down to `0`.
    pub fn predict<T: Scalar>(&self, tape: &mut Tape<T>, state: &StateVars) -> Result<Predicted> {
        self.check_state(tape, state)?;
        let top = self.config.top();
        let mut next = state.clone();
        let mut a_hat = vec![None; top + 1];
        for l in (0..=top).rev() {
            let input = if l == top {
                state.e[top]
            } else {
                tape.upsample2(next.e[l + 1])?
            };
            let prev = ConvLSTMState {
                hidden: state.r[l],
                cell: state.c[l],
            };
            let updated = self.lstm_down(tape, l, prev, input)?;
            next.r[l] = updated.hidden;
            next.c[l] = updated.cell;
            let mut prediction = decoder(tape, &self.modules[l].decoder, updated.hidden)?;
            if l == 0 {
                prediction = tape.clamp_max(prediction, self.config.pix_max);
            } else {
                // compared against the lower representation from t − 1
                let target = tape.max_pool2(state.r[l - 1])?;
                next.e[l] = error_units(tape, prediction, target)?;
            }
            a_hat[l] = Some(prediction);
        }
        let a_hat: Vec<Var> = a_hat.into_iter().map(|v| v.expect("every level set")).collect();
        Ok(Predicted {
            frame: a_hat[0],
            a_hat,
            state: next,
        })
    }

    /// Correction phase, levels `0` up to `N`, given the actual input.
    pub fn correct<T: Scalar>(&self, tape: &mut Tape<T>, predicted: Predicted, image: Var) -> Result<StateVars> {
        let top = self.config.top();
        let Predicted { a_hat, mut state, .. } = predicted;
        if tape.shape(image) != tape.shape(a_hat[0]) {
            return Err(Error::shape(
                "step",
                format!(
                    "image {:?} does not match prediction {:?}",
                    tape.shape(image),
                    tape.shape(a_hat[0])
                ),
            ));
        }
        for l in 0..=top {
            if l == 0 {
                state.e[0] = error_units(tape, a_hat[0], image)?;
            } else {
                let target = tape.max_pool2(state.r[l - 1])?;
                state.e[l] = error_units(tape, a_hat[l], target)?;
            }
            if l < top {
                let prev = ConvLSTMState {
                    hidden: state.r[l],
                    cell: state.c[l],
                };
                let updated = self.lstm_up(tape, l, prev, state.e[l])?;
                state.r[l] = updated.hidden;
                state.c[l] = updated.cell;
            }
        }
        Ok(state)
    }

    /// One full timestep; returns `Â_0^t` and the state at `t`.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, state: &StateVars, image: Var) -> Result<(Var, StateVars)> {
        let predicted = self.predict(tape, state)?;
        let frame = predicted.frame;
        let next = self.correct(tape, predicted, image)?;
        if !tape.value(frame).all_finite() {
            return Err(Error::NonFinite("prediction".into()));
        }
        next.check_finite(tape)?;
        Ok((frame, next))
    }
}

/// A configuration together with its weights, for inference on plain tensors.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub weights: NetworkWeights<T>,
}

/// Output of [`Network::rollout`].
#[derive(Debug, Clone)]
pub struct Rollout<T> {
    /// Predictions emitted while consuming the seed frames.
    pub seed_predictions: Vec<Tensor<T>>,
    /// Closed-loop predictions, one per horizon step.
    pub predictions: Vec<Tensor<T>>,
    pub final_state: NetworkState<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: NetworkConfig, weights: NetworkWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.check_against(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init_state(&self, batch: usize, height: usize, width: usize) -> Result<NetworkState<T>> {
        NetworkState::zeros(&self.config, batch, height, width)
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.config.image_channels {
            return Err(Error::shape(
                "step",
                format!(
                    "image {s:?} must be [B, {}, H, W]",
                    self.config.image_channels
                ),
            ));
        }
        Ok(())
    }

    /// One timestep without gradient tracking.
    pub fn step(&self, state: &NetworkState<T>, image: &Tensor<T>) -> Result<(Tensor<T>, NetworkState<T>)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, &self.config, false)?;
        let vars = state.bind(&mut tape);
        let img = tape.constant(image.clone());
        let (frame, next) = bound.step(&mut tape, &vars, img)?;
        Ok((tape.value(frame).clone(), next.read(&tape)))
    }

    /// Closed-loop step: the prediction is fed back as the input, so `E_0`
    /// compares the prediction with itself.
    pub fn step_closed_loop(&self, state: &NetworkState<T>) -> Result<(Tensor<T>, NetworkState<T>)> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, &self.config, false)?;
        let vars = state.bind(&mut tape);
        let predicted = bound.predict(&mut tape, &vars)?;
        let frame = predicted.frame;
        let next = bound.correct(&mut tape, predicted, frame)?;
        if !tape.value(frame).all_finite() {
            return Err(Error::NonFinite("prediction".into()));
        }
        next.check_finite(&tape)?;
        Ok((tape.value(frame).clone(), next.read(&tape)))
    }

    /// Feeds `seed_frames` (each `[B, C, H, W]`), then predicts `horizon`
    /// frames closed-loop. `observe` sees the state after every closed-loop
    /// step.
    pub fn rollout_with(
        &self,
        state: &NetworkState<T>,
        seed_frames: &[Tensor<T>],
        horizon: usize,
        mut observe: impl FnMut(usize, &NetworkState<T>),
    ) -> Result<Rollout<T>> {
        if seed_frames.is_empty() {
            return Err(Error::Config("rollout needs at least one seed frame".into()));
        }
        if horizon == 0 {
            return Err(Error::Config("rollout horizon must be at least 1".into()));
        }
        let mut state = state.clone();
        let mut seed_predictions = Vec::with_capacity(seed_frames.len());
        for frame in seed_frames {
            let (pred, next) = self.step(&state, frame)?;
            seed_predictions.push(pred);
            state = next;
        }
        let mut predictions = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let (pred, next) = self.step_closed_loop(&state)?;
            observe(t, &next);
            predictions.push(pred);
            state = next;
        }
        Ok(Rollout {
            seed_predictions,
            predictions,
            final_state: state,
        })
    }

    pub fn rollout(&self, state: &NetworkState<T>, seed_frames: &[Tensor<T>], horizon: usize) -> Result<Rollout<T>> {
        self.rollout_with(state, seed_frames, horizon, |_, _| {})
    }

    /// Runs the network over `frames` and returns `Â_0^t` for every `t`.
    pub fn predict_sequence(&self, frames: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Config("empty frame sequence".into()))?;
        self.check_image(first)?;
        let s = first.shape();
        let mut state = self.init_state(s[0], s[2], s[3])?;
        let mut out = Vec::with_capacity(frames.len());
        for frame in frames {
            let (pred, next) = self.step(&state, frame)?;
            out.push(pred);
            state = next;
        }
        Ok(out)
    }
}
