//! Self-checks: parameter counts against published references, gradient
//! checks of every differentiable op and of the whole network, metric
//! identities, and optionally a checkpoint load.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::gradcheck::{check_gradients, check_network_gradients, GradCheckOptions};
use crate::metrics::{psnr_from_mse, ssim};
use crate::precnet::{count_parameters, NetworkConfig, NetworkWeights};
use crate::tensor::Tensor;
use crate::training::LossWeights;

/// Op-level finite-difference tolerance.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Whole-network finite-difference tolerance.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Published parameter totals: standard, small, and single-LSTM.
pub const REFERENCE_COUNTS: [(&str, usize); 3] = [
    ("standard", 7_598_763),
    ("small", 848_123),
    ("single_lstm", 6_947_163),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

type OpLoss = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Weighted sum `Σ out · r` with a fixed pseudo-random `r`, so every output
/// element gets a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(random_tensor(&mut rng, &shape, 1.0));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

/// `(name, inputs, loss)` for every op-level gradient check.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, OpLoss)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    vec![
        (
            "conv2d",
            vec![r(&[2, 3, 5, 5]), r(&[4, 3, 3, 3]), r(&[4])],
            (|t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                project(t, y, 1)
            }) as OpLoss,
        ),
        ("max_pool2", vec![r(&[1, 2, 4, 4])], |t, v| {
            let y = t.max_pool2(v[0])?;
            project(t, y, 2)
        }),
        ("upsample2", vec![r(&[1, 2, 3, 3])], |t, v| {
            let y = t.upsample2(v[0])?;
            project(t, y, 3)
        }),
        ("concat_slice", vec![r(&[2, 2, 3, 3]), r(&[2, 3, 3, 3])], |t, v| {
            let c = t.concat_channels(v[0], v[1])?;
            let s = t.slice(c, 1, 1, 3)?;
            project(t, s, 4)
        }),
        ("elementwise", vec![r(&[2, 3, 4]), r(&[2, 3, 4])], |t, v| {
            let a = t.mul(v[0], v[1])?;
            let b = t.tanh(a);
            let c = t.hard_sigmoid(v[0]);
            let d = t.sub(b, c)?;
            let e = t.relu(v[1]);
            let f = t.add(d, e)?;
            let g = t.clamp_max(f, 0.8);
            let h = t.scale(g, -1.5);
            let m = t.mean(h);
            let p = project(t, h, 5)?;
            t.add(p, m)
        }),
    ]
}

/// Maximum relative error per op; elements on kinks are skipped.
pub fn op_gradient_errors() -> Result<Vec<(&'static str, f64, usize)>> {
    let opts = GradCheckOptions::default();
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let reports = check_gradients(&inputs, f, &opts)?;
            let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            let checked = reports.iter().map(|r| r.checked).sum();
            Ok((name, worst, checked))
        })
        .collect()
}

/// The tiny double-precision setting used for whole-network gradient checks:
/// three modules with 2/4/8 channels on 8×8 frames, three frames long.
pub struct TinyProblem {
    pub config: NetworkConfig,
    pub weights: NetworkWeights<f64>,
    pub frames: Vec<Tensor<f64>>,
    pub loss_weights: LossWeights,
}

impl TinyProblem {
    pub fn new(lambda: &[f64], seed: u64) -> Result<Self> {
        let config = NetworkConfig::from_channels(3, &[2, 4, 8], lambda)?;
        let weights = NetworkWeights::init(&config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let frames = (0..3)
            .map(|_| Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.0..1.0)))
            .collect();
        let loss_weights = LossWeights::new(&config, 3)?;
        Ok(Self {
            config,
            weights,
            frames,
            loss_weights,
        })
    }
}

/// Worst-case agreement between tape and finite-difference gradients over
/// every parameter tensor of a [`TinyProblem`].
#[derive(Debug, Clone)]
pub struct NetworkGradientError {
    pub max_rel_err: f64,
    /// Tensor holding the worst element.
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
    pub nonzero: usize,
}

impl NetworkGradientError {
    /// Below `tolerance`, and not vacuous: at least half of the compared
    /// elements carry a nonzero gradient (a dead decoder would otherwise
    /// agree trivially at zero).
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && 2 * self.nonzero >= self.checked && self.max_rel_err < tolerance
    }

    pub fn describe(&self) -> String {
        format!(
            "max relative error {:.3e} ({}) over {} parameters, {} nonzero, {} on kinks",
            self.max_rel_err, self.worst, self.checked, self.nonzero, self.skipped
        )
    }
}

pub fn network_gradient_error(problem: &TinyProblem) -> Result<NetworkGradientError> {
    let reports = check_network_gradients(
        &problem.config,
        &problem.weights,
        &problem.frames,
        &problem.loss_weights,
        &GradCheckOptions::default(),
    )?;
    let mut out = NetworkGradientError {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
        nonzero: 0,
    };
    for (name, r) in reports {
        out.checked += r.checked;
        out.skipped += r.skipped;
        out.nonzero += r.nonzero;
        if out.worst.is_empty() || r.max_rel_err > out.max_rel_err {
            out.max_rel_err = r.max_rel_err;
            out.worst = name;
        }
    }
    Ok(out)
}

fn metric_identities() -> Result<Vec<(&'static str, bool, String)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let self_ssim = ssim(&x, &x, 1.0)?;
    let a = Tensor::<f64>::full(&[1, 16, 16], 0.5);
    let b = Tensor::<f64>::full(&[1, 16, 16], 0.6);
    let constant = ssim(&a, &b, 1.0)?;
    let closed = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
    let p = psnr_from_mse(0.01, 1.0);
    Ok(vec![
        ("ssim_identity", self_ssim == 1.0, format!("ssim(x, x) = {self_ssim}")),
        (
            "ssim_constant_closed_form",
            (constant - closed).abs() < 1e-9,
            format!("{constant} vs {closed}"),
        ),
        ("psnr_20db", (p - 20.0).abs() < 1e-12, format!("psnr(0.01) = {p}")),
    ])
}

/// Runs every check; `checkpoint` is additionally loaded and validated.
pub fn run_verify(checkpoint: Option<&Path>) -> VerifyReport {
    let mut report = VerifyReport::default();
    for (name, expected) in REFERENCE_COUNTS {
        let config = NetworkConfig::preset(name).expect("built-in preset");
        let closed = count_parameters(&config);
        let enumerated = NetworkWeights::<f32>::zeros(&config)
            .map(|w| w.parameter_count())
            .unwrap_or(0);
        report.push(
            format!("param_count.{name}"),
            closed == expected && enumerated == expected,
            format!("closed form {closed}, enumerated {enumerated}, reference {expected}"),
        );
    }
    match op_gradient_errors() {
        Ok(errs) => {
            for (name, err, checked) in errs {
                report.push(
                    format!("gradient.{name}"),
                    err < OP_TOLERANCE && checked > 0,
                    format!("max relative error {err:.3e} over {checked} elements"),
                );
            }
        }
        Err(e) => report.push("gradient.ops", false, e.to_string()),
    }
    match TinyProblem::new(&[1.0, 0.5, 0.25], 11).and_then(|p| network_gradient_error(&p)) {
        Ok(g) => report.push("gradient.network", g.passed(NETWORK_TOLERANCE), g.describe()),
        Err(e) => report.push("gradient.network", false, e.to_string()),
    }
    match metric_identities() {
        Ok(checks) => {
            for (name, ok, detail) in checks {
                report.push(format!("metrics.{name}"), ok, detail);
            }
        }
        Err(e) => report.push("metrics", false, e.to_string()),
    }
    if let Some(dir) = checkpoint {
        match Checkpoint::load(dir) {
            Ok(ck) => report.push(
                "checkpoint.load",
                true,
                format!("{} parameters", ck.parameter_count()),
            ),
            Err(e) => report.push("checkpoint.load", false, e.to_string()),
        }
    }
    report
}
