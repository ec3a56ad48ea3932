//! Command-line entry points and experiment orchestration.
//!
//! Subcommands: `synth`, `pretrain`, `finetune`, `probe`, `ablate`,
//! `eval`. Every command reads one TOML configuration file (plus
//! repeatable `--set key.path=value` overrides), creates its output
//! directory, and writes the fully resolved configuration beside its
//! outputs, so any run can be reproduced from that file alone.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure.

pub mod config;
pub mod container;

pub use config::{
    load_config, parse_config, resolve_out_dir, write_resolved, AblateConfig, Paths, RunConfig,
    OUT_ROOT_ENV, RESOLVED_CONFIG_NAME,
};
pub use container::{load_checkpoint, save_checkpoint, ContainerError, MAGIC, SCHEMA_VERSION};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{init_head_params, init_pretrain_params};
use crate::nn::params::ParamStore;
use crate::objective::{LossToggles, ObjectiveError};
use crate::signal::{
    synth_dataset, DatasetManifest, ManifestEntry, RoiTimeSeries, SignalError,
    MANIFEST_SCHEMA_VERSION,
};
use crate::trainer::{
    self, config_hash, finetune, linear_probe, pretrain, Checkpoint, MetricsReport, NoHooks,
    Phase, Task, TrainConfig, TrainError,
};

/// Command failures, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Exit 2: the configuration (file, overrides, or flags) is wrong.
    #[error("{0}")]
    Config(String),
    /// Exit 3: input data, checkpoints, or the filesystem failed.
    #[error("{0}")]
    Data(String),
    /// Exit 4: training produced non-finite numbers.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. }
            | TrainError::NonFiniteGradient { .. }
            | TrainError::Objective(ObjectiveError::NonFinite(_)) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::BadConfig(_)
            | TrainError::Objective(_)
            | TrainError::Mask(_)
            | TrainError::Model(_)
            | TrainError::IncompatibleCheckpoint(_) => CliError::Config(e.to_string()),
            TrainError::Signal(s) => classify_signal(s, &e),
            TrainError::Graph(_)
            | TrainError::Param(_)
            | TrainError::MissingLabel { .. }
            | TrainError::WrongLabelKind { .. }
            | TrainError::ClassOutOfRange { .. }
            | TrainError::SingleClass
            | TrainError::EmptyInput(_)
            | TrainError::BadMetricInput(_)
            | TrainError::InconsistentRois { .. } => CliError::Data(e.to_string()),
        }
    }
}

fn classify_signal(s: &SignalError, outer: &dyn std::fmt::Display) -> CliError {
    match s {
        SignalError::BadSynthConfig(_) | SignalError::BadRatio(_) => {
            CliError::Config(outer.to_string())
        }
        _ => CliError::Data(outer.to_string()),
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        classify_signal(&e, &e)
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "stjema",
    version,
    about = "Self-supervised pretraining and evaluation for dynamic functional-connectivity graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ROI time-series cohort plus manifest.
    Synth(CommonArgs),
    /// Self-supervised pretraining; writes a checkpoint and loss trace.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning from a checkpoint (or from random
    /// initialization when no checkpoint is configured).
    Finetune(CommonArgs),
    /// Train only the affine head on a frozen checkpoint.
    Probe(CommonArgs),
    /// Pretrain → probe for each loss-term variant; emit a ranked table.
    Ablate(CommonArgs),
    /// Evaluate an already-trained model on the validation split.
    Eval(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override a configuration key (repeatable): --set train.steps=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Resume from paths.checkpoint, continuing its step counter up to
    /// train.steps.
    #[arg(long)]
    resume: bool,
}

/// Entry point used by the binary: parse, dispatch, map errors to exit
/// codes.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&load_ctx(&args, None)?),
        Command::Pretrain(args) => {
            cmd_pretrain(&load_ctx(&args.common, Some(Phase::Pretrain))?, args.resume)
        }
        Command::Finetune(args) => cmd_fit(&load_ctx(&args, Some(Phase::Finetune))?, false),
        Command::Probe(args) => cmd_fit(&load_ctx(&args, Some(Phase::Probe))?, true),
        Command::Ablate(args) => cmd_ablate(&load_ctx(&args, None)?),
        Command::Eval(args) => cmd_eval(&load_ctx(&args, None)?),
    }
}

struct Ctx {
    cfg: RunConfig,
    out_dir: PathBuf,
}

fn load_ctx(args: &CommonArgs, phase: Option<Phase>) -> Result<Ctx, CliError> {
    let mut cfg = load_config(&args.config, &args.set)?;
    if let Some(p) = phase {
        cfg.train.phase = p;
    }
    cfg.train.validate().map_err(CliError::from)?;
    let out_dir = resolve_out_dir(&cfg.paths);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    write_resolved(&out_dir, &cfg)?;
    Ok(Ctx { cfg, out_dir })
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<RoiTimeSeries>, CliError> {
    let manifest_path = cfg
        .paths
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Config("paths.manifest is required for this command".into()))?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let subjects = manifest.load_subjects(manifest_path)?;
    if subjects.is_empty() {
        return Err(CliError::Data(format!(
            "manifest {} lists no subjects",
            manifest_path.display()
        )));
    }
    Ok(subjects)
}

/// Validate a loaded checkpoint against the topology the configuration
/// implies: every expected tensor must exist with the expected shape.
fn check_topology(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    n_rois: usize,
    head_outputs: Option<usize>,
) -> Result<(), CliError> {
    let dims = cfg.model_dims(n_rois);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut reference =
        init_pretrain_params(&dims, &mut rng).map_err(TrainError::from).map_err(CliError::from)?;
    if let Some(n_out) = head_outputs {
        let head = init_head_params(&dims, n_out, &mut rng)
            .map_err(TrainError::from)
            .map_err(CliError::from)?;
        reference.extend_from(&head).expect("disjoint name sets");
    }
    for (name, value) in reference.iter() {
        let got = ckpt.params.get(name).map_err(|_| {
            CliError::Config(format!(
                "checkpoint lacks tensor {name} required by the configured topology"
            ))
        })?;
        if got.dim() != value.dim() {
            return Err(CliError::Config(format!(
                "checkpoint tensor {name} has shape {:?} but the configured topology needs {:?}",
                got.dim(),
                value.dim()
            )));
        }
    }
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CliError::Data(format!("serialization failed: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(ctx: &Ctx) -> Result<(), CliError> {
    let synth_cfg = ctx
        .cfg
        .synth
        .clone()
        .ok_or_else(|| CliError::Config("a [synth] section is required for this command".into()))?;
    let subjects = synth_dataset(&synth_cfg)?;
    let data_dir = ctx.out_dir.join("data");
    std::fs::create_dir_all(&data_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", data_dir.display())))?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let rel = PathBuf::from("data").join(format!("{}.txt", s.subject_id));
        crate::signal::write_roi_timeseries(s, &ctx.out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            subject_id: s.subject_id.clone(),
            path: rel,
            labels: s.labels.clone(),
        });
    }
    let manifest = DatasetManifest { schema_version: MANIFEST_SCHEMA_VERSION, entries };
    let manifest_path = ctx.out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    println!(
        "synth: {} subjects ({} ROIs x {} samples) -> {}",
        subjects.len(),
        subjects[0].n_rois(),
        subjects[0].t_max(),
        manifest_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn cmd_pretrain(ctx: &Ctx, resume: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&ctx.cfg)?;
    let resume_ckpt = if resume {
        let path = ctx.cfg.paths.checkpoint.as_deref().ok_or_else(|| {
            CliError::Config("--resume requires paths.checkpoint to point at a container".into())
        })?;
        let ckpt = load_checkpoint(path)?;
        check_topology(&ckpt, &ctx.cfg.train, dataset[0].n_rois(), None)?;
        Some(ckpt)
    } else {
        None
    };

    let (ckpt, trace) = pretrain(&ctx.cfg.train, &dataset, resume_ckpt.as_ref(), &mut NoHooks)?;
    let ckpt_path = ctx.out_dir.join("checkpoint.stj");
    save_checkpoint(&ckpt_path, &ckpt)?;
    write_jsonl(&ctx.out_dir.join("loss-trace.jsonl"), &trace)?;
    let rows: Vec<String> = trace
        .last()
        .map(|r| {
            vec![format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.step + 1,
                r.loss.total,
                r.loss.node_spat,
                r.loss.adj_spat,
                r.loss.node_temp,
                r.loss.adj_temp,
                r.target_std
            )]
        })
        .unwrap_or_default();
    write_csv(
        &ctx.out_dir.join("metrics.csv"),
        "steps,total,node_spat,adj_spat,node_temp,adj_temp,target_std",
        &rows,
    )?;
    match trace.last() {
        Some(r) => println!(
            "pretrain: {} steps, final loss {:.6}, target-rep std {:.4} -> {}",
            ckpt.step,
            r.loss.total,
            r.target_std,
            ckpt_path.display()
        ),
        None => println!("pretrain: checkpoint already at step {}, nothing to do", ckpt.step),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune / probe
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct EpochRecord {
    seed: u64,
    epoch: usize,
    loss: f64,
    val_metric: f64,
    rep_std: f64,
}

fn require_task(cfg: &RunConfig) -> Result<Task, CliError> {
    cfg.task
        .clone()
        .ok_or_else(|| CliError::Config("a [task] section is required for this command".into()))
}

fn task_outputs(task: &Task) -> usize {
    match task {
        Task::Classify { n_classes, .. } => *n_classes,
        Task::Regress { .. } => 1,
    }
}

fn cmd_fit(ctx: &Ctx, probe: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&ctx.cfg)?;
    let task = require_task(&ctx.cfg)?;
    let n_rois = dataset[0].n_rois();
    let encoder: ParamStore = match ctx.cfg.paths.checkpoint.as_deref() {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_topology(&ckpt, &ctx.cfg.train, n_rois, None)?;
            ckpt.params
        }
        None if probe => {
            return Err(CliError::Config(
                "probe requires paths.checkpoint (a pretrained model to freeze)".into(),
            ));
        }
        None => trainer::fresh_encoder(&ctx.cfg.train, n_rois)?,
    };

    let seeds = ctx.cfg.run_seeds();
    let mut epoch_records = Vec::new();
    let mut csv_rows = Vec::with_capacity(seeds.len());
    let mut metric_values = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mut cfg = ctx.cfg.train.clone();
        cfg.seed = seed;
        let fit = if probe {
            linear_probe(&cfg, &encoder, &dataset, &task)?
        } else {
            finetune(&cfg, &encoder, &dataset, &task)?
        };
        let report = &fit.report;
        for (epoch, ((loss, metric), rep_std)) in report
            .epoch_loss
            .iter()
            .zip(&report.val_metric)
            .zip(&report.rep_std)
            .enumerate()
        {
            epoch_records.push(EpochRecord {
                seed,
                epoch,
                loss: *loss,
                val_metric: *metric,
                rep_std: *rep_std,
            });
        }
        csv_rows.push(format!(
            "{seed},{},{},{:.6}",
            fmt_opt(report.auroc),
            fmt_opt(report.mae),
            report.epoch_loss.last().copied().unwrap_or(f64::NAN)
        ));
        metric_values.push(report.auroc.or(report.mae).unwrap_or(f64::NAN));
        let model = Checkpoint {
            params: fit.params,
            target: ParamStore::new(),
            opt: BTreeMap::new(),
            step: cfg.epochs as u64,
            config_hash: config_hash(&cfg),
        };
        save_checkpoint(&ctx.out_dir.join(format!("model-{seed}.stj")), &model)?;
    }
    write_jsonl(&ctx.out_dir.join("metrics.jsonl"), &epoch_records)?;
    write_csv(&ctx.out_dir.join("metrics.csv"), "seed,auroc,mae,final_loss", &csv_rows)?;
    let mean = metric_values.iter().sum::<f64>() / metric_values.len() as f64;
    let kind = if probe { "probe" } else { "finetune" };
    let metric_name = match &task {
        Task::Classify { .. } => "auroc",
        Task::Regress { .. } => "mae",
    };
    println!(
        "{kind}: {} seed(s), mean {metric_name} {:.4} -> {}",
        seeds.len(),
        mean,
        ctx.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct AblationRecord {
    variant: String,
    seed: u64,
    auroc: f64,
}

fn cmd_ablate(ctx: &Ctx) -> Result<(), CliError> {
    let dataset = load_dataset(&ctx.cfg)?;
    let task = require_task(&ctx.cfg)?;
    if !matches!(task, Task::Classify { .. }) {
        return Err(CliError::Config(
            "ablate ranks variants by probe AUROC and needs a classification task".into(),
        ));
    }
    let seeds = if ctx.cfg.ablate.seeds.is_empty() {
        vec![ctx.cfg.train.seed]
    } else {
        ctx.cfg.ablate.seeds.clone()
    };

    let all = LossToggles::default();
    let mut variants: Vec<(String, LossToggles, Option<(f64, f64)>)> = vec![
        ("full".into(), all, None),
        ("node-off".into(), LossToggles { node: false, ..all }, None),
        ("edge-off".into(), LossToggles { edge: false, ..all }, None),
        ("spatial-off".into(), LossToggles { spatial: false, ..all }, None),
        ("temporal-off".into(), LossToggles { temporal: false, ..all }, None),
    ];
    for pair in &ctx.cfg.ablate.alpha_grid {
        variants.push((format!("alpha-{}-{}", pair[0], pair[1]), all, Some((pair[0], pair[1]))));
    }

    let mut records = Vec::new();
    let mut summary: Vec<(String, f64)> = Vec::new();
    for (name, toggles, alpha) in &variants {
        let mut sum = 0.0;
        for &seed in &seeds {
            let mut cfg = ctx.cfg.train.clone();
            cfg.seed = seed;
            cfg.toggles = *toggles;
            if let Some((lo, hi)) = alpha {
                cfg.alpha_min = *lo;
                cfg.alpha_max = *hi;
            }
            let (ckpt, _) = pretrain(&cfg, &dataset, None, &mut NoHooks)?;
            let fit = linear_probe(&cfg, &ckpt.params, &dataset, &task)?;
            let auroc = fit.report.auroc.expect("classification probe yields AUROC");
            records.push(AblationRecord { variant: name.clone(), seed, auroc });
            sum += auroc;
        }
        summary.push((name.clone(), sum / seeds.len() as f64));
    }
    summary.sort_by(|a, b| b.1.total_cmp(&a.1));

    write_jsonl(&ctx.out_dir.join("ablation.jsonl"), &records)?;
    let rows: Vec<String> = summary
        .iter()
        .enumerate()
        .map(|(i, (name, mean))| format!("{},{name},{mean:.6},{}", i + 1, seeds.len()))
        .collect();
    write_csv(&ctx.out_dir.join("ablation.csv"), "rank,variant,mean_auroc,n_seeds", &rows)?;
    println!("ablate: {} variants x {} seed(s)", variants.len(), seeds.len());
    for (i, (name, mean)) in summary.iter().enumerate() {
        println!("  {:>2}. {name:<16} mean AUROC {mean:.4}", i + 1);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(ctx: &Ctx) -> Result<(), CliError> {
    let dataset = load_dataset(&ctx.cfg)?;
    let task = require_task(&ctx.cfg)?;
    let path = ctx.cfg.paths.checkpoint.as_deref().ok_or_else(|| {
        CliError::Config("eval requires paths.checkpoint (a trained model container)".into())
    })?;
    let ckpt = load_checkpoint(path)?;
    check_topology(&ckpt, &ctx.cfg.train, dataset[0].n_rois(), Some(task_outputs(&task)))?;
    let report: MetricsReport =
        trainer::evaluate_only(&ctx.cfg.train, &ckpt.params, &dataset, &task)?;
    write_jsonl(&ctx.out_dir.join("metrics.jsonl"), std::slice::from_ref(&report))?;
    let row = format!(
        "{},{},{}",
        ctx.cfg.train.seed,
        fmt_opt(report.auroc),
        fmt_opt(report.mae)
    );
    write_csv(&ctx.out_dir.join("metrics.csv"), "seed,auroc,mae", &[row])?;
    println!(
        "eval: auroc {} mae {} -> {}",
        fmt_opt(report.auroc),
        fmt_opt(report.mae),
        ctx.out_dir.display()
    );
    Ok(())
}
