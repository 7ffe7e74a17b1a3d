//! Central finite-difference gradient checking in double precision.
//!
//! The numeric side only ever evaluates the forward function on constant
//! leaves; it never reads gradients from the tape.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::precnet::{NetworkConfig, NetworkWeights};
use crate::tensor::Tensor;
use crate::training::{loss_and_gradients, sequence_loss, LossWeights};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
    /// Elements whose one-sided slopes disagree by more than this (relative)
    /// straddle a kink and are skipped.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            kink_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub input: usize,
    pub checked: usize,
    pub skipped: usize,
    /// Checked elements with a nonzero analytic gradient.
    pub nonzero: usize,
    pub max_rel_err: f64,
    /// Flat index of the element with the largest error.
    pub worst_index: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences, for every element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(tape);

    let evaluate = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    finite_differences(inputs, &analytic, evaluate, opts)
}

/// Central differences of `evaluate` around `inputs`, compared element by
/// element against `analytic`.
pub fn finite_differences(
    inputs: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    evaluate: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheckReport>> {
    let base = evaluate(inputs)?;
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        let mut report = GradCheckReport {
            input: which,
            checked: 0,
            skipped: 0,
            nonzero: 0,
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + opts.eps;
            let plus = evaluate(&work)?;
            work[which].data_mut()[i] = orig - opts.eps;
            let minus = evaluate(&work)?;
            work[which].data_mut()[i] = orig;

            let forward = (plus - base) / opts.eps;
            let backward = (base - minus) / opts.eps;
            let scale = forward.abs().max(backward.abs()).max(opts.floor);
            if (forward - backward).abs() / scale > opts.kink_tolerance {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(a, numeric, opts.floor);
            if a != 0.0 {
                report.nonzero += 1;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = i;
            }
            report.checked += 1;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Checks the sequence-loss gradient of every network parameter tensor.
/// Reports are paired with the tensor names.
pub fn check_network_gradients(
    config: &NetworkConfig,
    weights: &NetworkWeights<f64>,
    frames: &[Tensor<f64>],
    loss_weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>> {
    let (_, grads) = loss_and_gradients(config, weights, frames, loss_weights)?;
    let analytic: Vec<Vec<f64>> = grads.iter().map(|g| g.data().to_vec()).collect();
    let inputs: Vec<Tensor<f64>> = weights.tensors().into_iter().cloned().collect();
    let evaluate = |values: &[Tensor<f64>]| {
        let mut w = weights.clone();
        for (dst, src) in w.tensors_mut().into_iter().zip(values) {
            dst.data_mut().copy_from_slice(src.data());
        }
        sequence_loss(config, &w, frames, loss_weights)
    };
    let reports = finite_differences(&inputs, &analytic, evaluate, opts)?;
    Ok(weights
        .named_tensors(config.variant)
        .into_iter()
        .map(|(n, _)| n)
        .zip(reports)
        .collect())
}
