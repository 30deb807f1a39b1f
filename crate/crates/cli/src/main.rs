//! `camscope`: generate phantoms, train, evaluate and explain.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use camscope_core::cam::{explain, overlay_export, Upsampling};
use camscope_core::eval::{evaluate, write_report, EvalOptions};
use camscope_core::metrics::{format_percent, OperatingPolicy};
use camscope_core::model::{forward_with, load_checkpoint, save_checkpoint, Checkpoint};
use camscope_core::phantom::{generate_dataset, PhantomSpec};
use camscope_core::preprocess::apply_lung_window;
use camscope_core::store::{read_json, write_volume, DatasetIndex, ManifestFile, Split, ValueKind, VolumeMeta};
use camscope_core::train::{load_samples, train, write_log_csv};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ModelPreset, RunConfig, RunOverrides};

#[derive(Parser)]
#[command(name = "camscope", version, about = "Attention-guided 3D activation maps for chest CT")]
struct Cli {
    /// Worker threads for case-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Gen(GenArgs),
    /// Train a classifier on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Write activation maps and overlays for selected cases.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Phantom spec (JSON). Built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed; falls back to CAMSCOPE_SEED.
    #[arg(long, env = "CAMSCOPE_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint, log and frozen config.
    #[arg(long)]
    out: PathBuf,
    /// Run config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: RunOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum OpPoint {
    Fixed,
    Youden,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config the checkpoint must match (e.g. the frozen `run_config.json`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "fixed")]
    op_point: OpPoint,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// Nearest-neighbour instead of trilinear heatmap upsampling.
    #[arg(long)]
    nearest: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Case ids to explain, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    cases: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// Class to explain (1 = typical).
    #[arg(long, default_value_t = 1)]
    class: u8,
    /// Heatmap opacity in the overlays.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    nearest: bool,
}

/// An error with the exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut spec: PhantomSpec = match &a.spec {
        Some(p) => read_json(p).map_err(usage)?,
        None => Default::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(usage)?;
    let index = generate_dataset(&spec, &a.out).map_err(runtime)?;
    log::info!(
        "wrote {} cases to {} (seed {})",
        spec.total_cases(),
        a.out.display(),
        index.seed
    );
    Ok(())
}

fn open_split(data: &Path, split: Split) -> anyhow::Result<ManifestFile> {
    let index_path = data.join("manifest.json");
    let index: DatasetIndex = read_json(&index_path)?;
    Ok(ManifestFile::open(index.split_path(&index_path, split)?)?)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::preset(a.overrides.preset.unwrap_or(ModelPreset::Desk)),
    };
    run.apply(&a.overrides);
    run.data_dir = Some(a.data.clone());
    run.validate().map_err(usage)?;

    let train_set = open_split(&a.data, Split::Train).map_err(usage)?;
    let val_set = open_split(&a.data, Split::Val).map_err(usage)?;
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(runtime)?;
    run.save(&a.out.join("run_config.json")).map_err(runtime)?;

    let train_samples = load_samples(&train_set, run.model.input_shape, run.window).map_err(runtime)?;
    let val_samples = load_samples(&val_set, run.model.input_shape, run.window).map_err(runtime)?;
    log::info!(
        "training on {} cases, validating on {}",
        train_samples.len(),
        val_samples.len()
    );
    let outcome = train(&train_samples, &val_samples, &run.model, &run.train, |e| {
        log::info!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  acc {:.3}  val loss {:.4}  val acc {:.3}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.train_accuracy,
            e.val_loss,
            e.val_accuracy
        )
    })
    .map_err(runtime)?;
    write_log_csv(&outcome.log, &a.out.join("train_log.csv")).map_err(runtime)?;
    let meta = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_val_accuracy": outcome.best_val_accuracy,
        "train": run.train,
        "window": run.window,
    });
    save_checkpoint(&a.out.join("checkpoint.ckpt"), &run.model, &outcome.params, &meta).map_err(runtime)?;
    log::info!(
        "kept epoch {} (val acc {:.3})",
        outcome.best_epoch,
        outcome.best_val_accuracy
    );
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(usage)
}

fn window_of(ck: &Checkpoint) -> camscope_core::preprocess::WindowSetting {
    ck.metadata
        .get("window")
        .and_then(|w| serde_json::from_value(w.clone()).ok())
        .unwrap_or_default()
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if !(0.0..1.0).contains(&a.tau) {
        return Err(usage(anyhow::anyhow!("--tau must lie in [0, 1)")));
    }
    let ck = load_ckpt(&a.checkpoint)?;
    if let Some(p) = &a.config {
        let run = RunConfig::load(p).map_err(usage)?;
        if run.model != ck.config {
            return Err(usage(anyhow::anyhow!(
                "checkpoint model config does not match {}",
                p.display()
            )));
        }
    }
    ck.params.check_compatible(&ck.config).map_err(usage)?;
    let manifest = open_split(&a.data, a.split.into()).map_err(usage)?;
    let samples = load_samples(&manifest, ck.config.input_shape, window_of(&ck)).map_err(runtime)?;
    let opts = EvalOptions {
        policy: match a.op_point {
            OpPoint::Fixed => OperatingPolicy::Fixed,
            OpPoint::Youden => OperatingPolicy::Youden,
        },
        tau: a.tau,
        upsampling: if a.nearest {
            Upsampling::Nearest
        } else {
            Upsampling::Trilinear
        },
        cam_class: 1,
    };
    let report = evaluate(&ck.params, &ck.config, &samples, &opts).map_err(runtime)?;
    write_report(&report, &a.out).map_err(runtime)?;
    let op = &report.operating_point;
    println!("AUC {:.4}", report.auc);
    println!(
        "sensitivity {:.3}  specificity {:.3}  threshold {}",
        op.sensitivity, op.specificity, op.threshold
    );
    let ir = |r: &camscope_core::metrics::RateCount| match r.rate {
        Some(v) => format!("{}/{} ({}%)", r.identified, r.total, format_percent(v)),
        None => "-".into(),
    };
    for (lobe, r) in &report.identification.per_lobe {
        println!("IR {lobe}: {}", ir(r));
    }
    println!("IR case level: {}", ir(&report.identification.case_level));
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> CmdResult {
    if !(0.0..1.0).contains(&a.tau) {
        return Err(usage(anyhow::anyhow!("--tau must lie in [0, 1)")));
    }
    if a.class > 1 {
        return Err(usage(anyhow::anyhow!("--class must be 0 or 1")));
    }
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(usage(anyhow::anyhow!("--alpha must lie in [0, 1]")));
    }
    let ck = load_ckpt(&a.checkpoint)?;
    let splits: Vec<ManifestFile> = Split::ALL
        .iter()
        .map(|&s| open_split(&a.data, s))
        .collect::<anyhow::Result<_>>()
        .map_err(usage)?;
    let mut found = Vec::new();
    for id in &a.cases {
        let hit = splits
            .iter()
            .find_map(|m| m.manifest.find(id).map(|e| (m, e.clone())));
        match hit {
            Some(h) => found.push(h),
            None => return Err(usage(anyhow::anyhow!("unknown case id {id:?}"))),
        }
    }
    let mode = if a.nearest {
        Upsampling::Nearest
    } else {
        Upsampling::Trilinear
    };
    let window = window_of(&ck);
    for (manifest, entry) in found {
        let (ct, meta, mask) = manifest.read_case(&entry).map_err(runtime)?;
        let lung = camscope_core::preprocess::preprocess(&ct, &meta, &mask, window, ck.config.input_shape)
            .map_err(runtime)?;
        let stack = forward_with(&lung.data, &ck.params, &ck.config, None).map_err(runtime)?;
        let e = explain(&ck.params, &ck.config, &stack, a.class, a.tau, ct.dims(), mode).map_err(runtime)?;
        let heat_meta = VolumeMeta::new(ct.dims(), meta.spacing, ValueKind::Heatmap, &entry.case_id);
        write_volume(
            &e.heatmap.volume_scale,
            &heat_meta,
            a.out.join(format!("{}_heatmap", entry.case_id)),
        )
        .map_err(runtime)?;
        let display = apply_lung_window(&ct, window).map_err(runtime)?;
        let files = overlay_export(
            &display,
            &e.heatmap.volume_scale,
            &entry.case_id,
            &a.out.join("overlays"),
            a.alpha,
        )
        .map_err(runtime)?;
        println!(
            "{}: p(typical) {:.3}, {} overlay slices",
            entry.case_id,
            stack.likelihoods[1],
            files.len()
        );
    }
    Ok(())
}
