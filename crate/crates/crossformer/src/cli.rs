use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use crossformer_core::autodiff::OpKind;
use crossformer_core::data::{split_held_out, synth_dataset, windows, SequenceRecord, SkeletonSpec, SynthOptions};
use crossformer_core::gradcheck::{model_gradcheck, DEFAULT_EPS, DEFAULT_SEED};
use crossformer_core::model::{param_count, param_ledger, ModelConfig, ModelParams};
use crossformer_core::train::{evaluate, model_predictor, train, TrainConfig};
use serde_json::json;

use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{CliError, Result};
use crate::{ablate, config, records, report};

/// Largest tape the gradient check will build; finite differences cost two
/// forward passes per scalar parameter.
pub const GRADCHECK_MAX_NODES: usize = 100_000;
pub const GRADCHECK_MAX_PARAMS: usize = 50_000;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "crossformer", version, about = "Spatio-temporal transformer for 2D-to-3D pose lifting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint after every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train a set of module/stage variants under a matched budget.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients for every slot.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic JSONL dataset.
    Synth(SynthArgs),
    /// Print the resolved config, parameter count and parameter ledger.
    Inspect(ConfigArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.spatial_dim=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for checkpoint.bin, log.jsonl and the final report.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Skip flip ensembling.
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated row names; defaults to the full table.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Corrupt one op's backward rule (test fixture).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub records: usize,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 17)]
    pub joints: usize,
    /// Largest per-joint displacement from the rest pose, in mm.
    #[arg(long)]
    pub max_amplitude: Option<f64>,
    /// Gaussian noise on the 2D inputs, in normalized image units.
    #[arg(long, default_value_t = 0.0)]
    pub noise_2d: f64,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    }
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| CliError::io("<stdout>", e))
}

fn resolve(args: &ConfigArgs, base: TrainConfig) -> Result<TrainConfig> {
    config::load(&base, args.config.as_deref(), &args.overrides)
}

fn require_path(path: &Option<String>, key: &str) -> Result<PathBuf> {
    path.as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Core(crossformer_core::Error::Config(format!("`{key}` is not set"))))
}

fn check_joints(records: &[SequenceRecord], model: &ModelConfig, path: &Path) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.num_joints() != model.num_joints) {
        return Err(CliError::Core(crossformer_core::Error::Config(format!(
            "{}: record `{}` has {} joints but the model expects {}",
            path.display(),
            r.id,
            r.num_joints(),
            model.num_joints
        ))));
    }
    Ok(())
}

/// Training data and the held-out set named by the config.
pub fn load_split(cfg: &TrainConfig) -> Result<(Vec<SequenceRecord>, Vec<SequenceRecord>)> {
    let train_path = require_path(&cfg.train_path, "train_path")?;
    let all = records::load_records(&train_path)?;
    if all.is_empty() {
        return Err(CliError::Core(crossformer_core::Error::Config(format!("{}: dataset is empty", train_path.display()))));
    }
    check_joints(&all, &cfg.model, &train_path)?;
    match &cfg.eval_path {
        Some(p) => {
            let eval = records::load_records(Path::new(p))?;
            check_joints(&eval, &cfg.model, Path::new(p))?;
            Ok((all, eval))
        }
        None => Ok(split_held_out(all)),
    }
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(&args.config, TrainConfig::default())?;
    let (train_records, held) = load_split(&cfg)?;
    let skeleton = SkeletonSpec::for_joints(cfg.model.num_joints);
    let mut train_windows = Vec::new();
    for r in &train_records {
        train_windows.extend(windows(r, cfg.model.frames)?);
    }
    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let ckpt_path = args.out_dir.join("checkpoint.bin");
    let log_path = args.out_dir.join("log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;

    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    if cfg.freeze_interaction {
        params.zero_interaction_modules();
    }
    let header = |epoch| CheckpointHeader { model: cfg.model.clone(), epoch };
    checkpoint::save(&ckpt_path, &header(0), &params)?;
    let start = json!({
        "event": "start",
        "train_records": train_records.len(),
        "eval_records": held.len(),
        "train_windows": train_windows.len(),
        "param_count": params.count(),
        "seed": cfg.seed,
    });
    emit(out, &start)?;
    writeln!(log, "{start}").map_err(|e| CliError::io(&log_path, e))?;

    // The callback cannot return CliError, so file failures are parked here
    // and reported after `train` unwinds.
    let mut side_error: Option<CliError> = None;
    let result = train(&cfg, &mut params, &skeleton, &train_windows, &held, |entry, p| {
        let mut line = serde_json::to_value(entry).expect("epoch log serializes");
        line["event"] = json!("epoch");
        let step = (|| -> Result<()> {
            checkpoint::save(&ckpt_path, &header(entry.epoch), p)?;
            writeln!(log, "{line}").map_err(|e| CliError::io(&log_path, e))?;
            emit(out, &line)
        })();
        step.map_err(|e| {
            let msg = e.to_string();
            side_error = Some(e);
            crossformer_core::Error::Config(msg)
        })
    });
    if let Some(e) = side_error {
        return Err(e);
    }
    let logs = result?;

    if !held.is_empty() {
        let rep = evaluate(&held, cfg.model.frames, &skeleton, cfg.flip_test, model_predictor(&params, &cfg.model))?;
        report::write(&args.out_dir.join("report.csv"), &report::to_csv(&rep)?)?;
        report::write(&args.out_dir.join("report.json"), &report::to_json(&rep)?)?;
    }
    let done = json!({
        "event": "done",
        "epochs": logs.len(),
        "checkpoint": ckpt_path.display().to_string(),
    });
    writeln!(log, "{done}").map_err(|e| CliError::io(&log_path, e))?;
    emit(out, &done)
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let data = records::load_records(&args.data)?;
    let model = &ckpt.header.model;
    let skeleton = SkeletonSpec::for_joints(model.num_joints);
    let rep = evaluate(&data, model.frames, &skeleton, !args.no_flip, model_predictor(&ckpt.params, model))?;
    let csv = report::to_csv(&rep)?;
    if let Some(p) = &args.csv {
        report::write(p, &csv)?;
    }
    if let Some(p) = &args.json {
        report::write(p, &report::to_json(&rep)?)?;
    }
    out.write_all(csv.as_bytes()).map_err(|e| CliError::io("<stdout>", e))
}

fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(&args.config, TrainConfig::default())?;
    let names: Vec<String> =
        if args.rows.is_empty() { ablate::DEFAULT_ROWS.iter().map(|s| s.to_string()).collect() } else { args.rows.clone() };
    let variants = ablate::parse_rows(&names)?;
    let (train_records, held) = load_split(&cfg)?;
    let results = ablate::run(&cfg, &variants, &args.seeds, train_records, Some(held), |r| {
        eprintln!(
            "{}",
            json!({"event": "ablation_row", "row": r.variant.name, "seed": r.seed, "final_eval_mpjpe": r.final_eval_mpjpe})
        );
    })?;
    let csv = ablate::to_csv(&cfg.model, &results)?;
    match &args.out {
        Some(p) => report::write(p, &csv),
        None => out.write_all(csv.as_bytes()).map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let base = TrainConfig { model: ModelConfig::tiny(), ..TrainConfig::default() };
    let cfg = resolve(&args.config, base)?;
    let fault = args.fault.as_deref().map(parse_op).transpose()?;
    let nodes = crossformer_core::gradcheck::model_tape_len(&cfg.model)?;
    if nodes > GRADCHECK_MAX_NODES {
        return Err(CliError::Core(crossformer_core::Error::Config(format!(
            "gradcheck graph has {nodes} nodes; the limit is {GRADCHECK_MAX_NODES}, use a smaller config"
        ))));
    }
    let count = param_count(&cfg.model);
    if count > GRADCHECK_MAX_PARAMS {
        return Err(CliError::Core(crossformer_core::Error::Config(format!(
            "gradcheck over {count} parameters would take too long; the limit is {GRADCHECK_MAX_PARAMS}"
        ))));
    }
    let slots = model_gradcheck(&cfg.model, args.seed, args.eps, fault)?;
    let mut worst: Option<(String, f64)> = None;
    for s in &slots {
        emit(out, &json!({"slot": s.name, "max_rel_error": s.error, "pass": s.error < GRADCHECK_TOLERANCE}))?;
        if worst.as_ref().map_or(true, |(_, e)| s.error > *e || s.error.is_nan()) {
            worst = Some((s.name.clone(), s.error));
        }
    }
    let (name, max) = worst.unwrap_or_default();
    emit(out, &json!({"summary": true, "slots": slots.len(), "tape_nodes": nodes, "max_rel_error": max, "worst_slot": name}))?;
    if !(max < GRADCHECK_TOLERANCE) {
        return Err(CliError::GradCheck(format!("slot `{name}` has relative error {max:e} (limit {GRADCHECK_TOLERANCE:e})")));
    }
    Ok(())
}

fn parse_op(name: &str) -> Result<OpKind> {
    OpKind::ALL
        .iter()
        .copied()
        .find(|k| k.name() == name)
        .ok_or_else(|| CliError::Core(crossformer_core::Error::Config(format!("unknown op `{name}`"))))
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let skeleton = SkeletonSpec::for_joints(args.joints);
    let mut opts = SynthOptions { noise_2d: args.noise_2d, ..SynthOptions::default() };
    if let Some(a) = args.max_amplitude {
        opts.max_amplitude = a;
    }
    let data = synth_dataset(&skeleton, args.seed, args.records, args.frames, &opts)?;
    records::save_records(&args.out, &data)?;
    emit(out, &json!({"event": "synth", "out": args.out.display().to_string(), "records": data.len(), "frames": args.frames}))
}

fn cmd_inspect(args: &ConfigArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(args, TrainConfig::default())?;
    let ledger: Vec<_> = param_ledger(&cfg.model)
        .iter()
        .map(|s| json!({"name": s.name, "shape": s.shape, "numel": s.numel()}))
        .collect();
    let value = json!({
        "param_count": param_count(&cfg.model),
        "config": cfg,
        "ledger": ledger,
    });
    let text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Format(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| CliError::io("<stdout>", e))
}
