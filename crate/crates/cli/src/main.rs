//! `precoder` — generate data, train, evaluate and verify the
//! predictive-coding next-frame predictor.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use precoder::checkpoint::Checkpoint;
use precoder::data::ppm::save_dataset;
use precoder::data::{generate_synthetic, load_frames, Recording, SequenceDataset, ShapeKind, SyntheticSpec};
use precoder::eval::{evaluate_next_frame, evaluate_rollout, DEFAULT_CONTEXT};
use precoder::precnet::count_parameters;
use precoder::training::{history_csv, Trainer};
use precoder::verify::run_verify;
use precoder::{Error, Network, NetworkConfig, NetworkWeights, Result, Scalar, Tensor};
use serde::Serialize;

use crate::config::{Precision, TrainFile};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "precoder", version, about = "Predictive-coding next-frame video prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded bouncing-shapes dataset as P6 frames.
    GenData(GenDataArgs),
    /// Train from a TOML config; writes a checkpoint and loss history.
    Train(TrainArgs),
    /// Score next-frame predictions after `context` frames, with the
    /// copy-last-frame baseline alongside.
    Eval(EvalArgs),
    /// Predict `horizon` frames closed-loop after `context` frames.
    Rollout(RolloutArgs),
    /// Run the gradient, parameter-count and metric self-checks.
    Verify(VerifyArgs),
    /// Print exact parameter counts.
    ParamCount(ParamCountArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    sequences: usize,
    #[arg(long, default_value_t = 30)]
    length: usize,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    shapes: usize,
    #[arg(long, default_value_t = 6)]
    min_shape: usize,
    #[arg(long, default_value_t = 10)]
    max_shape: usize,
    #[arg(long, default_value_t = 1.0)]
    min_speed: f64,
    #[arg(long, default_value_t = 2.0)]
    max_speed: f64,
    /// Canvas sides must be multiples of this (at least 2^(modules − 1) of the target network).
    #[arg(long, default_value_t = 4)]
    divisor: usize,
    /// Canvas grey level in [0, 1]. A non-black canvas keeps the ReLU
    /// decoder away from its dead zone early in training.
    #[arg(long, default_value_t = 0.3)]
    background: f32,
    /// Lowest per-channel shape colour.
    #[arg(long, default_value_t = 0.6)]
    min_color: f32,
    /// Highest per-channel shape colour.
    #[arg(long, default_value_t = 1.0)]
    max_color: f32,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONTEXT)]
    context: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Debug, Args, Serialize)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONTEXT)]
    context: usize,
    #[arg(long, default_value_t = 15)]
    horizon: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    /// Also load and validate this checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ParamCountArgs {
    /// Count a named preset (standard, small, single_lstm); all by default.
    #[arg(long)]
    preset: Option<String>,
    /// Count the network of a training config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a, A: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    threads: usize,
    args: &'a A,
    resolved: R,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn write_manifest<A: Serialize, R: Serialize>(out: &Path, command: &str, args: &A, resolved: R) -> Result<()> {
    write_json(
        &out.join(RUN_MANIFEST),
        &RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            threads: rayon::current_num_threads(),
            args,
            resolved,
        },
    )
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        height: args.size,
        width: args.size,
        shape_count: args.shapes,
        kinds: vec![ShapeKind::Rectangle, ShapeKind::Disc],
        size_range: (args.min_shape, args.max_shape),
        speed_range: (args.min_speed, args.max_speed),
        divisor: args.divisor,
        background: args.background,
        color_range: (args.min_color, args.max_color),
        seed: args.seed,
    };
    let ds = generate_synthetic(&spec, args.sequences, args.length)?;
    save_dataset(&ds, &args.out)?;
    write_manifest(&args.out, "gen-data", args, &spec)?;
    eprintln!(
        "wrote {} recordings x {} frames ({}x{}) to {}",
        args.sequences,
        args.length,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ResolvedTrain<'a> {
    file: &'a TrainFile,
    network: &'a NetworkConfig,
    parameter_count: usize,
    precision: Precision,
    train_recordings: usize,
    val_recordings: usize,
    resumed_from: Option<&'a Path>,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut file = TrainFile::load(&args.config)?;
    if let Some(seed) = args.seed {
        file.training.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        file.training.epochs = epochs;
    }
    let config = file.network.resolve()?;
    file.training.validate()?;
    let precision = args.precision.or(file.precision).unwrap_or(Precision::F32);

    let data = load_frames(&file.dataset)?;
    let (train, val) = match &file.val_dataset {
        Some(p) => (data, Some(load_frames(p)?)),
        None if file.val_recordings > 0 => {
            let (t, v) = data.split_tail(file.val_recordings);
            (t, (!v.recordings.is_empty()).then_some(v))
        }
        None => (data, None),
    };
    let resolved = ResolvedTrain {
        file: &file,
        network: &config,
        parameter_count: count_parameters(&config),
        precision,
        train_recordings: train.recordings.len(),
        val_recordings: val.as_ref().map_or(0, |v| v.recordings.len()),
        resumed_from: args.resume.as_deref(),
    };
    write_manifest(&args.out, "train", args, &resolved)?;
    match precision {
        Precision::F32 => train_with::<f32>(args, &file, config, &train, val.as_ref()),
        Precision::F64 => train_with::<f64>(args, &file, config, &train, val.as_ref()),
    }
}

fn save_training<T: Scalar>(out: &Path, trainer: &Trainer<T>) -> Result<()> {
    Checkpoint::new(trainer.config.clone(), &trainer.weights)?
        .with_training(&trainer.adam, trainer.progress.clone())
        .save(&out.join("checkpoint"))?;
    write_file(&out.join("loss.csv"), history_csv(&trainer.progress.history))?;
    let mut steps = String::from("step,loss\n");
    for (i, l) in trainer.progress.step_losses.iter().enumerate() {
        steps.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&out.join("steps.csv"), steps)
}

fn train_with<T: Scalar>(
    args: &TrainArgs,
    file: &TrainFile,
    config: NetworkConfig,
    train: &SequenceDataset,
    val: Option<&SequenceDataset>,
) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.config != config {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different network",
                    dir.display()
                )));
            }
            let (Some(adam), Some(progress)) = (ck.optimizer, ck.progress) else {
                return Err(Error::Config(format!(
                    "checkpoint {} holds no optimizer state to resume",
                    dir.display()
                )));
            };
            Trainer::resume(config, file.training.clone(), ck.weights.cast(), adam.cast(), progress)?
        }
        None => {
            let weights = NetworkWeights::<T>::init(&config, file.training.seed)?;
            Trainer::new(config, file.training.clone(), weights)?
        }
    };
    trainer.fit(train, val, |t, rec| {
        let val = rec.val_loss.map_or("-".into(), |v| format!("{v:.6}"));
        eprintln!(
            "epoch {:>4}  lr {:.1e}  train {:.6}  val {val}",
            rec.epoch, rec.lr, rec.train_loss
        );
        save_training(&args.out, t)
    })?;
    save_training(&args.out, &trainer)?;
    eprintln!(
        "{} epochs, {} optimizer steps; checkpoint in {}",
        trainer.progress.epochs_completed,
        trainer.progress.step_losses.len(),
        args.out.join("checkpoint").display()
    );
    Ok(())
}

fn load_network<T: Scalar>(dir: &Path) -> Result<Network<T>> {
    let ck = Checkpoint::load(dir)?;
    Network::new(ck.config, ck.weights.cast())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    match args.precision {
        Precision::F32 => eval_with::<f32>(args),
        Precision::F64 => eval_with::<f64>(args),
    }
}

fn eval_with<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let net = load_network::<T>(&args.checkpoint)?;
    let ds = load_frames(&args.data)?;
    let report = evaluate_next_frame(&net, &ds, args.context, args.batch)?;
    write_file(&args.out.join("eval.csv"), report.to_csv())?;
    let summary = report.summary();
    write_json(&args.out.join("eval_summary.json"), &summary)?;
    write_manifest(&args.out, "eval", args, &net.config)?;
    println!(
        "windows {}  model: mse {:.6} psnr {:.3} ssim {:.4}  copy-last: mse {:.6} psnr {:.3} ssim {:.4}",
        summary.model.frame_count,
        summary.model.mean_mse,
        summary.model.mean_psnr,
        summary.model.mean_ssim,
        summary.baseline.mean_mse,
        summary.baseline.mean_psnr,
        summary.baseline.mean_ssim
    );
    Ok(())
}

fn cmd_rollout(args: &RolloutArgs) -> Result<()> {
    match args.precision {
        Precision::F32 => rollout_with::<f32>(args),
        Precision::F64 => rollout_with::<f64>(args),
    }
}

#[derive(Debug, Serialize)]
struct RolloutSummary {
    windows: usize,
    horizon: usize,
    closed_loop_e0_max: f64,
    mean_mse: Vec<f64>,
    mean_ssim: Vec<f64>,
}

fn rollout_with<T: Scalar>(args: &RolloutArgs) -> Result<()> {
    let net = load_network::<T>(&args.checkpoint)?;
    let ds = load_frames(&args.data)?;
    let mut emitted: BTreeMap<(usize, usize), Vec<Tensor<f32>>> = BTreeMap::new();
    let report = evaluate_rollout(&net, &ds, args.context, args.horizon, args.batch, |w, _, frame| {
        emitted.entry((w.recording, w.start)).or_default().push(frame.clone());
        Ok(())
    })?;
    let recordings = emitted
        .into_iter()
        .map(|((r, start), frames)| Recording {
            name: format!("{}_{start:06}", ds.recordings[r].name),
            frames,
        })
        .collect();
    let predicted = SequenceDataset::new(ds.dims, None, recordings)?;
    save_dataset(&predicted, &args.out.join("frames"))?;
    write_file(&args.out.join("rollout.csv"), report.to_csv())?;
    let summary = RolloutSummary {
        windows: report.windows.len(),
        horizon: args.horizon,
        closed_loop_e0_max: report.closed_loop_e0_max,
        mean_mse: report.per_horizon.iter().map(|r| r.summary().mean_mse).collect(),
        mean_ssim: report.per_horizon.iter().map(|r| r.summary().mean_ssim).collect(),
    };
    write_json(&args.out.join("rollout_summary.json"), &summary)?;
    write_manifest(&args.out, "rollout", args, &net.config)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let report = run_verify(args.checkpoint.as_deref());
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(out) = &args.out {
        write_json(&out.join("verify.json"), &report)?;
        write_manifest(out, "verify", args, ())?;
    }
    Ok(report.all_passed())
}

fn cmd_param_count(args: &ParamCountArgs) -> Result<()> {
    let configs: Vec<(String, NetworkConfig)> = match (&args.preset, &args.config) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("give --preset or --config, not both".into()));
        }
        (Some(name), None) => vec![(
            name.clone(),
            NetworkConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?,
        )],
        (None, Some(path)) => vec![(path.display().to_string(), TrainFile::load(path)?.network.resolve()?)],
        (None, None) => ["standard", "small", "single_lstm"]
            .iter()
            .map(|n| (n.to_string(), NetworkConfig::preset(n).expect("built-in preset")))
            .collect(),
    };
    let counts: BTreeMap<&str, usize> = configs
        .iter()
        .map(|(n, c)| (n.as_str(), count_parameters(c)))
        .collect();
    for (name, config) in &configs {
        println!("{name}\t{}", count_parameters(config));
    }
    if let Some(out) = &args.out {
        write_manifest(out, "param-count", args, &counts)?;
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("PRECODER_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PRECODER_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<bool> {
    configure_threads()?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Rollout(a) => cmd_rollout(a)?,
        Command::Verify(a) => return cmd_verify(a),
        Command::ParamCount(a) => cmd_param_count(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
