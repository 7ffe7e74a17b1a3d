//! Convolutional LSTM cell, decoding convolution and the merged
//! positive/negative error unit.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gate order used for every per-gate array: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "c"];
const FORGET: usize = 1;

fn uniform<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
}

/// Peephole-free convolutional LSTM weights with one bias per gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLSTMWeights<T> {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    /// `[Chid, Cin, k, k]` per gate.
    pub w_x: [Tensor<T>; 4],
    /// `[Chid, Chid, k, k]` per gate.
    pub w_h: [Tensor<T>; 4],
    /// `[Chid]` per gate.
    pub b: [Tensor<T>; 4],
}

impl<T: Scalar> ConvLSTMWeights<T> {
    pub fn zeros(in_channels: usize, hidden_channels: usize, kernel: usize) -> Self {
        let wx = [hidden_channels, in_channels, kernel, kernel];
        let wh = [hidden_channels, hidden_channels, kernel, kernel];
        Self {
            in_channels,
            hidden_channels,
            kernel,
            w_x: std::array::from_fn(|_| Tensor::zeros(&wx)),
            w_h: std::array::from_fn(|_| Tensor::zeros(&wh)),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden_channels])),
        }
    }

    /// Uniform `[-s, s]` with `s = 1/sqrt(fan_in)`; the forget bias starts at 0.
    pub fn init<R: Rng>(in_channels: usize, hidden_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let k2 = kernel * kernel;
        let sx = 1.0 / ((in_channels * k2) as f64).sqrt();
        let sh = 1.0 / ((hidden_channels * k2) as f64).sqrt();
        let sb = 1.0 / (((in_channels + hidden_channels) * k2) as f64).sqrt();
        let wx = [hidden_channels, in_channels, kernel, kernel];
        let wh = [hidden_channels, hidden_channels, kernel, kernel];
        let w_x = std::array::from_fn(|_| uniform(&wx, sx, rng));
        let w_h = std::array::from_fn(|_| uniform(&wh, sh, rng));
        let b = std::array::from_fn(|g| {
            if g == FORGET {
                Tensor::zeros(&[hidden_channels])
            } else {
                uniform(&[hidden_channels], sb, rng)
            }
        });
        Self {
            in_channels,
            hidden_channels,
            kernel,
            w_x,
            w_h,
            b,
        }
    }

    /// `4·(k²·(Cin+Chid)·Chid + Chid)`.
    pub fn parameter_count(in_channels: usize, hidden_channels: usize, kernel: usize) -> usize {
        4 * (kernel * kernel * (in_channels + hidden_channels) * hidden_channels + hidden_channels)
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(12);
        for (g, name) in GATES.iter().enumerate() {
            out.push((format!("w_x{name}"), &self.w_x[g]));
        }
        for (g, name) in GATES.iter().enumerate() {
            out.push((format!("w_h{name}"), &self.w_h[g]));
        }
        for (g, name) in GATES.iter().enumerate() {
            out.push((format!("b_{name}"), &self.b[g]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let Self { w_x, w_h, b, .. } = self;
        w_x.iter_mut().chain(w_h.iter_mut()).chain(b.iter_mut()).collect()
    }

    /// Registers the twelve tensors as trainable leaves and fuses them into
    /// one `[4·Chid, Cin+Chid, k, k]` kernel so a step costs one convolution.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundLSTM> {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut leaves = Vec::with_capacity(12);
        leaves.extend(self.w_x.iter().map(&mut leaf));
        leaves.extend(self.w_h.iter().map(&mut leaf));
        leaves.extend(self.b.iter().map(&mut leaf));
        BoundLSTM::from_leaves(tape, self.in_channels, self.hidden_channels, leaves)
    }
}

/// LSTM weights recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundLSTM {
    pub in_channels: usize,
    pub hidden_channels: usize,
    kernel: Var,
    bias: Var,
    /// Leaf handles in [`ConvLSTMWeights::tensors`] order.
    pub leaves: Vec<Var>,
}

impl BoundLSTM {
    /// Fuses twelve leaves already on the tape, in
    /// [`ConvLSTMWeights::tensors`] order.
    pub fn from_leaves<T: Scalar>(
        tape: &mut Tape<T>,
        in_channels: usize,
        hidden_channels: usize,
        leaves: Vec<Var>,
    ) -> Result<Self> {
        if leaves.len() != 12 {
            return Err(Error::shape("convlstm", format!("expected 12 leaves, got {}", leaves.len())));
        }
        let mut per_gate = Vec::with_capacity(4);
        for g in 0..4 {
            per_gate.push(tape.concat(&[leaves[g], leaves[4 + g]], 1)?);
        }
        let kernel = tape.concat(&per_gate, 0)?;
        let bias = tape.concat(&leaves[8..12], 0)?;
        Ok(Self {
            in_channels,
            hidden_channels,
            kernel,
            bias,
            leaves,
        })
    }
}

/// Hidden and cell state of one LSTM, `[B, Chid, H, W]` each.
#[derive(Debug, Clone, Copy)]
pub struct ConvLSTMState {
    pub hidden: Var,
    pub cell: Var,
}

/// One convolutional LSTM update:
/// `i,f,o = hs(W_x·x + W_h·R + b)`, `g = tanh(...)`, `C' = f⊙C + i⊙g`,
/// `R' = o⊙tanh(C')`.
pub fn convlstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    lstm: &BoundLSTM,
    state: ConvLSTMState,
    input: Var,
) -> Result<ConvLSTMState> {
    let xs = tape.shape(input).to_vec();
    let rs = tape.shape(state.hidden).to_vec();
    if xs.len() != 4 || xs[1] != lstm.in_channels {
        return Err(Error::shape(
            "convlstm_step",
            format!("input {xs:?} does not have {} channels", lstm.in_channels),
        ));
    }
    if rs.len() != 4 || rs[1] != lstm.hidden_channels || tape.shape(state.cell) != rs.as_slice() {
        return Err(Error::shape(
            "convlstm_step",
            format!("state {rs:?} does not match {} hidden channels", lstm.hidden_channels),
        ));
    }
    if xs[0] != rs[0] || xs[2..] != rs[2..] {
        return Err(Error::shape(
            "convlstm_step",
            format!("input {xs:?} and state {rs:?} disagree on batch or spatial size"),
        ));
    }
    let ch = lstm.hidden_channels;
    let z = tape.concat_channels(input, state.hidden)?;
    let pre = tape.conv2d(z, lstm.kernel, lstm.bias)?;
    let pi = tape.slice(pre, 1, 0, ch)?;
    let pf = tape.slice(pre, 1, ch, ch)?;
    let po = tape.slice(pre, 1, 2 * ch, ch)?;
    let pg = tape.slice(pre, 1, 3 * ch, ch)?;
    let i = tape.hard_sigmoid(pi);
    let f = tape.hard_sigmoid(pf);
    let o = tape.hard_sigmoid(po);
    let g = tape.tanh(pg);
    let keep = tape.mul(f, state.cell)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(o, squashed)?;
    Ok(ConvLSTMState { hidden, cell })
}

/// `relu({prediction − target, target − prediction})`, channels doubled.
pub fn error_units<T: Scalar>(tape: &mut Tape<T>, prediction: Var, target: Var) -> Result<Var> {
    if tape.shape(prediction) != tape.shape(target) {
        return Err(Error::shape(
            "error_units",
            format!(
                "prediction {:?} vs target {:?}",
                tape.shape(prediction),
                tape.shape(target)
            ),
        ));
    }
    let pos = tape.sub(prediction, target)?;
    let neg = tape.sub(target, prediction)?;
    let merged = tape.concat_channels(pos, neg)?;
    Ok(tape.relu(merged))
}

/// Decoding convolution `[Cout, Cin, k, k]` + bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let s = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        Self {
            weight: uniform(&[out_channels, in_channels, kernel, kernel], s, rng),
            bias: uniform(&[out_channels], s, rng),
        }
    }

    pub fn parameter_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        kernel * kernel * in_channels * out_channels + out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundConv {
        let (weight, bias) = if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        };
        BoundConv {
            in_channels: self.in_channels(),
            weight,
            bias,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub in_channels: usize,
    pub weight: Var,
    pub bias: Var,
}

impl BoundConv {
    pub fn leaves(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// `relu(conv(R))`. The bottom-level clamp at `pix_max` is applied by the caller.
pub fn decoder<T: Scalar>(tape: &mut Tape<T>, conv: &BoundConv, representation: Var) -> Result<Var> {
    let rs = tape.shape(representation);
    if rs.len() != 4 || rs[1] != conv.in_channels {
        return Err(Error::shape(
            "decoder",
            format!("representation {rs:?} does not have {} channels", conv.in_channels),
        ));
    }
    let out = tape.conv2d(representation, conv.weight, conv.bias)?;
    Ok(tape.relu(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn zero_state(tape: &mut Tape<f64>, shape: &[usize]) -> ConvLSTMState {
        ConvLSTMState {
            hidden: tape.constant(Tensor::zeros(shape)),
            cell: tape.constant(Tensor::zeros(shape)),
        }
    }

    #[test]
    fn zero_weights_keep_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let lstm = ConvLSTMWeights::<f64>::zeros(2, 3, 3).bind(&mut tape, false).unwrap();
        let state = zero_state(&mut tape, &[1, 3, 4, 4]);
        let x = tape.constant(random(&[1, 2, 4, 4], &mut rng, 5.0));
        let next = convlstm_step(&mut tape, &lstm, state, x).unwrap();
        assert!(tape.value(next.hidden).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(next.cell).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_state_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = ConvLSTMWeights::<f64>::init(2, 3, 3, &mut rng);
        for t in w.tensors_mut() {
            for v in t.data_mut() {
                *v *= 20.0;
            }
        }
        let mut tape = Tape::new();
        let lstm = w.bind(&mut tape, false).unwrap();
        let mut state = zero_state(&mut tape, &[2, 3, 4, 4]);
        for _ in 0..4 {
            let x = tape.constant(random(&[2, 2, 4, 4], &mut rng, 10.0));
            state = convlstm_step(&mut tape, &lstm, state, x).unwrap();
            assert!(tape.value(state.hidden).data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn step_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = ConvLSTMWeights::<f32>::init(2, 3, 3, &mut rng);
        let x = Tensor::<f32>::from_fn(&[1, 2, 4, 4], |i| (i as f32 * 0.37).sin());
        let run = || {
            let mut tape = Tape::new();
            let lstm = w.bind(&mut tape, false).unwrap();
            let state = ConvLSTMState {
                hidden: tape.constant(Tensor::zeros(&[1, 3, 4, 4])),
                cell: tape.constant(Tensor::zeros(&[1, 3, 4, 4])),
            };
            let xv = tape.constant(x.clone());
            let s = convlstm_step(&mut tape, &lstm, state, xv).unwrap();
            (tape.value(s.hidden).clone(), tape.value(s.cell).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn input_channel_mismatch_rejected() {
        let mut tape = Tape::new();
        let lstm = ConvLSTMWeights::<f64>::zeros(2, 3, 3).bind(&mut tape, false).unwrap();
        let state = zero_state(&mut tape, &[1, 3, 4, 4]);
        let x = tape.constant(Tensor::zeros(&[1, 5, 4, 4]));
        assert!(convlstm_step(&mut tape, &lstm, state, x).is_err());
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let mut tape = Tape::new();
        let lstm = ConvLSTMWeights::<f64>::zeros(2, 3, 3).bind(&mut tape, false).unwrap();
        let state = zero_state(&mut tape, &[1, 3, 4, 4]);
        let x = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        assert!(convlstm_step(&mut tape, &lstm, state, x).is_err());
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        for &(cin, ch, k) in &[(2, 3, 3), (6, 60, 3), (120, 240, 3), (1, 1, 5)] {
            let w = ConvLSTMWeights::<f32>::zeros(cin, ch, k);
            let n: usize = w.tensors().iter().map(|(_, t)| t.len()).sum();
            assert_eq!(n, ConvLSTMWeights::<f32>::parameter_count(cin, ch, k));
        }
    }

    #[test]
    fn forget_bias_starts_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = ConvLSTMWeights::<f64>::init(4, 5, 3, &mut rng);
        assert!(w.b[FORGET].data().iter().all(|&v| v == 0.0));
        assert!(w.b[0].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn convlstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = ConvLSTMWeights::<f64>::init(2, 3, 3, &mut rng);
        let x = random(&[1, 2, 4, 4], &mut rng, 1.0);
        let r0 = random(&[1, 3, 4, 4], &mut rng, 0.5);
        let c0 = random(&[1, 3, 4, 4], &mut rng, 0.5);
        let inputs: Vec<Tensor<f64>> = w.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(inputs.len(), 12);
        let reports = check_gradients(
            &inputs,
            |tape, vars| {
                let mut per_gate = Vec::new();
                for g in 0..4 {
                    per_gate.push(tape.concat(&[vars[g], vars[4 + g]], 1)?);
                }
                let kernel = tape.concat(&per_gate, 0)?;
                let bias = tape.concat(&vars[8..12], 0)?;
                let lstm = BoundLSTM {
                    in_channels: 2,
                    hidden_channels: 3,
                    kernel,
                    bias,
                    leaves: vars.to_vec(),
                };
                let state = ConvLSTMState {
                    hidden: tape.constant(r0.clone()),
                    cell: tape.constant(c0.clone()),
                };
                let xv = tape.constant(x.clone());
                let next = convlstm_step(tape, &lstm, state, xv)?;
                Ok(tape.sum(next.hidden))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        for r in &reports {
            assert!(r.max_rel_err < 1e-4, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn error_units_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let t = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![0.25]).unwrap());
        let e = error_units(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(e).data(), &[0.75, 0.0]);

        let same = error_units(&mut tape, p, p).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0, 0.0]);
    }

    #[test]
    fn error_units_shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let t = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(error_units(&mut tape, p, t).is_err());
    }

    #[test]
    fn error_units_sum_is_l1_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let a = random(&[2, 3, 4, 4], &mut rng, 1.0);
            let b = random(&[2, 3, 4, 4], &mut rng, 1.0);
            let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
            let mut tape = Tape::new();
            let (av, bv) = (tape.constant(a), tape.constant(b));
            let e = error_units(&mut tape, av, bv).unwrap();
            assert_eq!(tape.shape(e), &[2, 6, 4, 4]);
            let s: f64 = tape.value(e).data().iter().sum();
            assert!((s - l1).abs() < 1e-10);
            // disjoint support per site: for each (b, c, y, x), at most one is nonzero
            let d = tape.value(e).data();
            for bi in 0..2 {
                for j in 0..48 {
                    let pos = d[bi * 96 + j];
                    let neg = d[bi * 96 + 48 + j];
                    assert!(pos == 0.0 || neg == 0.0);
                }
            }
        }
    }

    #[test]
    fn decoder_zero_and_negative_bias() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f64).cos()));
        let zero = ConvWeights::<f64>::zeros(4, 3, 3).bind(&mut tape, false);
        let out = decoder(&mut tape, &zero, r).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        let mut neg = ConvWeights::<f64>::zeros(4, 3, 3);
        neg.bias = Tensor::full(&[3], -0.5);
        let neg = neg.bind(&mut tape, false);
        let out = decoder(&mut tape, &neg, r).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_channel_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::zeros(&[1, 5, 4, 4]));
        let conv = ConvWeights::<f64>::zeros(4, 3, 3).bind(&mut tape, false);
        assert!(decoder(&mut tape, &conv, r).is_err());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = ConvWeights::<f64>::init(3, 2, 3, &mut rng);
        let r = random(&[2, 3, 4, 4], &mut rng, 1.0);
        let reports = check_gradients(
            &[r, w.weight.clone(), w.bias.clone()],
            |tape, v| {
                let conv = BoundConv {
                    in_channels: 3,
                    weight: v[1],
                    bias: v[2],
                };
                let out = decoder(tape, &conv, v[0])?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        for r in &reports {
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
