//! Command-line surface. Every command prints `key=value` lines on stdout;
//! progress and errors go to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Axis;

use crate::config::RunConfig;
use crate::data::{load_sequence, load_split, preprocess, read_manifest, write_synthetic_dataset, Modality, SkeletonLayout, Split};
use crate::gradcheck::{gradcheck, GradcheckConfig};
use crate::graph::write_matrix_csv;
use crate::model::{Batch, HyperGcnModel, ModelConfig};
use crate::train::{
    ensemble_scores, evaluate, lr_at, metrics_line, scores_from_text, scores_to_text, train_epoch,
    TrainState,
};
use crate::{par, Error, Result};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const THREADS_VAR: &str = "HGCN_THREADS";
pub const SEED_VAR: &str = "HGCN_SEED";

#[derive(Debug, Parser)]
#[command(name = "hypergcn", version, about = "Adaptive hyper-graph convolution for skeleton action recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on one manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "joint")]
        modality: String,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write per-sample class scores here.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Softmax score fusion of several score files.
    Ensemble {
        /// Comma-separated stream weights; uniform when omitted.
        #[arg(long)]
        weights: Option<String>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        /// Model section of this run config replaces the tiny default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to 1e-4, or 1e-8 with `--linear`.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Check the model with every nonlinearity removed.
        #[arg(long)]
        linear: bool,
        /// Negate the analytic gradient of tensors with this name prefix.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Parameter and FLOP counts.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input frames; the config value when omitted.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Dump the adaptive incidence matrices and edge weights built for one sample.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "joint")]
        modality: String,
    },
    /// Write a separable synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "chain5")]
        layout: String,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Put every fourth sample in the validation split.
        #[arg(long)]
        val: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::BoundaryDegeneracy { .. } => EXIT_NUMERIC,
        Error::MagicMismatch { .. }
        | Error::TruncatedFile { .. }
        | Error::TrailingData { .. }
        | Error::ShapeOverflow { .. }
        | Error::NonFiniteData { .. }
        | Error::LayoutMismatch { .. }
        | Error::EmptySequence
        | Error::LabelOutOfRange { .. }
        | Error::Data(_)
        | Error::Io { .. } => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

/// Stdout text of a finished command and its exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub text: String,
    pub code: i32,
}

impl From<String> for Output {
    fn from(text: String) -> Self {
        Self { text, code: 0 }
    }
}

/// Runs one command.
pub fn run(cli: Cli) -> Result<Output> {
    if let Some(n) = env_value::<usize>(THREADS_VAR)? {
        par::init_threads(n);
    }
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out).map(Output::from),
        Command::Eval { checkpoint, manifest, modality, split, scores, batch_size } => {
            cmd_eval(&checkpoint, &manifest, &modality, &split, scores.as_deref(), batch_size).map(Output::from)
        }
        Command::Ensemble { weights, files } => cmd_ensemble(&files, weights.as_deref()).map(Output::from),
        Command::Gradcheck { config, seed, tolerance, linear, corrupt } => {
            cmd_gradcheck(config.as_deref(), seed, tolerance, linear, corrupt)
        }
        Command::Flops { config, frames } => cmd_flops(config.as_deref(), frames).map(Output::from),
        Command::ExportGraph { checkpoint, sample, out, modality } => {
            cmd_export_graph(&checkpoint, &sample, &out, &modality).map(Output::from)
        }
        Command::Synth { out, layout, frames, classes, count, val, seed } => {
            let layout = SkeletonLayout::by_name(&layout).map_err(|e| Error::Config(e.to_string()))?;
            let manifest = write_synthetic_dataset(&out, &layout, frames, classes, count, val, seed)?;
            Ok(format!("manifest={}\nsamples={count}\n", manifest.display()).into())
        }
    }
}

fn env_value<T: std::str::FromStr>(var: &str) -> Result<Option<T>> {
    match std::env::var(var) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config(format!("{var}={v:?} is not valid"))),
        Err(_) => Ok(None),
    }
}

fn load_checkpoint(path: &Path) -> Result<HyperGcnModel> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    HyperGcnModel::load(path)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(Error::Config(format!("split must be train or val, got {s:?}"))),
    }
}

pub fn cmd_train(config_path: &Path, out: &Path) -> Result<String> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = env_value::<u64>(SEED_VAR)? {
        cfg.seed = seed;
    }
    let manifest_path = cfg.manifest.clone().ok_or_else(|| Error::Config("manifest is required for train".into()))?;
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("config.cfg"), &cfg.to_text())?;

    let layout = cfg.model.skeleton()?;
    let manifest = read_manifest(&manifest_path)?;
    let train = load_split(&manifest, Split::Train, &layout, cfg.model.frames, cfg.modality)?;
    let val = load_split(&manifest, Split::Val, &layout, cfg.model.frames, cfg.modality)?;
    if let Some(s) = train.iter().chain(&val).find(|s| s.label >= cfg.model.num_classes) {
        return Err(Error::LabelOutOfRange { label: s.label, classes: cfg.model.num_classes });
    }

    let mut model = HyperGcnModel::new(cfg.model.clone(), cfg.seed)?;
    let mut state = TrainState::new(&model, cfg.seed);
    let mut metrics = String::new();
    let metrics_path = out.join("metrics.tsv");
    let mut last = None;
    for epoch in 0..cfg.optim.total_epochs {
        let lr = lr_at(epoch, &cfg.optim)?;
        let stats = train_epoch(&mut model, &train, &mut state, &cfg.optim)?;
        let val_acc = if val.is_empty() { None } else { Some(evaluate(&model, &val, cfg.optim.batch_size)?.0) };
        if let Some(v) = val_acc {
            state.best_accuracy = state.best_accuracy.max(v);
        }
        let line = metrics_line(epoch, lr, stats, val_acc);
        eprintln!("{line}");
        metrics.push_str(&line);
        metrics.push('\n');
        write_file(&metrics_path, &metrics)?;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            model.save(out.join(format!("epoch_{epoch:04}.hgcn")))?;
        }
        last = Some((stats, val_acc));
    }
    let checkpoint = out.join("model.hgcn");
    model.save(&checkpoint)?;

    let (stats, val_acc) = last.expect("total_epochs is positive");
    let mut summary = String::new();
    writeln!(summary, "epochs={}", cfg.optim.total_epochs).unwrap();
    writeln!(summary, "seed={}", cfg.seed).unwrap();
    writeln!(summary, "params={}", model.count_params()).unwrap();
    writeln!(summary, "train_samples={}", train.len()).unwrap();
    writeln!(summary, "val_samples={}", val.len()).unwrap();
    writeln!(summary, "train_loss={:.6}", stats.loss).unwrap();
    writeln!(summary, "train_acc={:.4}", stats.accuracy).unwrap();
    match val_acc {
        Some(v) => writeln!(summary, "val_acc={v:.4}\nbest_val_acc={:.4}", state.best_accuracy).unwrap(),
        None => writeln!(summary, "val_acc=-").unwrap(),
    }
    writeln!(summary, "checkpoint={}", checkpoint.display()).unwrap();
    writeln!(summary, "metrics={}", metrics_path.display()).unwrap();
    write_file(&out.join("summary.txt"), &summary)?;
    Ok(summary)
}

pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    modality: &str,
    split: &str,
    scores: Option<&Path>,
    batch_size: usize,
) -> Result<String> {
    let model = load_checkpoint(checkpoint)?;
    let modality: Modality = modality.parse()?;
    let split = parse_split(split)?;
    if !manifest.is_file() {
        return Err(Error::Config(format!("manifest {} does not exist", manifest.display())));
    }
    let entries = read_manifest(manifest)?;
    let data = load_split(&entries, split, &model.config.skeleton()?, model.config.frames, modality)?;
    if data.is_empty() {
        return Err(Error::Data(format!("no {} samples in {}", split.name(), manifest.display())));
    }
    if let Some(s) = data.iter().find(|s| s.label >= model.config.num_classes) {
        return Err(Error::LabelOutOfRange { label: s.label, classes: model.config.num_classes });
    }
    let (acc, matrix) = evaluate(&model, &data, batch_size)?;
    let mut out = format!("samples={}\ntop1={acc:.4}\n", data.len());
    if let Some(path) = scores {
        let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
        write_file(path, &scores_to_text(&matrix, &labels))?;
        writeln!(out, "scores={}", path.display()).unwrap();
    }
    Ok(out)
}

pub fn cmd_ensemble(files: &[PathBuf], weights: Option<&str>) -> Result<String> {
    let mut sets = Vec::with_capacity(files.len());
    let mut labels: Option<Vec<usize>> = None;
    for f in files {
        let text = fs::read_to_string(f).map_err(|e| Error::Config(format!("cannot read {}: {e}", f.display())))?;
        let (scores, l) = scores_from_text(&text)?;
        match &labels {
            Some(prev) if *prev != l => {
                return Err(Error::ShapeMismatch(format!("{} has different labels", f.display())));
            }
            _ => labels = Some(l),
        }
        sets.push(scores);
    }
    let weights: Vec<f64> = match weights {
        Some(w) => w
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad weight {x:?}"))))
            .collect::<Result<_>>()?,
        None => vec![1.0; sets.len()],
    };
    let labels = labels.unwrap_or_default();
    let acc = ensemble_scores(&sets, &weights, &labels)?;
    Ok(format!("streams={}\nsamples={}\ntop1={acc:.4}\n", sets.len(), labels.len()))
}

pub fn cmd_gradcheck(
    config: Option<&Path>,
    seed: Option<u64>,
    tolerance: Option<f64>,
    linear: bool,
    corrupt: Option<String>,
) -> Result<Output> {
    let model = match config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig::tiny(),
    };
    let mut gc = if linear {
        GradcheckConfig::linear_from(model)
    } else {
        GradcheckConfig { model, ..GradcheckConfig::default() }
    };
    if let Some(t) = tolerance {
        gc.tolerance = t;
    }
    gc.seed = match seed {
        Some(s) => s,
        None => env_value(SEED_VAR)?.unwrap_or(0),
    };
    gc.corrupt = corrupt;
    let report = gradcheck(&gc)?;
    let mut out = String::new();
    for (group, (checked, err)) in report.groups() {
        writeln!(out, "group={group} checked={checked} max_rel_error={err:.3e}").unwrap();
    }
    writeln!(out, "seed={}", report.seed).unwrap();
    writeln!(out, "attempts={}", report.attempts).unwrap();
    writeln!(out, "checked={}", report.checked()).unwrap();
    writeln!(out, "excluded={}", report.excluded()).unwrap();
    writeln!(out, "margin={:.3e}", report.margin).unwrap();
    writeln!(out, "min_degree={:.3e}", report.min_degree).unwrap();
    writeln!(out, "max_rel_error={:.3e}", report.max_error()).unwrap();
    writeln!(out, "tolerance={:.1e}", report.tolerance).unwrap();
    writeln!(out, "result={}", if report.passed() { "PASS" } else { "FAIL" }).unwrap();
    Ok(Output { text: out, code: if report.passed() { 0 } else { EXIT_NUMERIC } })
}

pub fn cmd_flops(config: Option<&Path>, frames: Option<usize>) -> Result<String> {
    let model_cfg = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    let frames = frames.unwrap_or(model_cfg.frames);
    let joints = model_cfg.joints()?;
    let model = HyperGcnModel::new(model_cfg, 0)?;
    let flops = model.estimate_flops(frames);
    Ok(format!(
        "params={}\nframes={frames}\njoints={joints}\nflops={flops}\ngflops={:.3}\n",
        model.count_params(),
        flops as f64 / 1e9
    ))
}

pub fn cmd_export_graph(checkpoint: &Path, sample: &Path, out: &Path, modality: &str) -> Result<String> {
    let model = load_checkpoint(checkpoint)?;
    let modality: Modality = modality.parse()?;
    let seq = load_sequence(sample)?;
    let s = preprocess(&seq, &model.config.skeleton()?, model.config.frames, modality)?;
    let (_, cache) = model.forward(&Batch::new(&[&s]), false)?;
    fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let mut files = 0;
    let mut shape = None;
    let per_stage = model.config.layers_per_stage;
    for (i, branches) in cache.hypergraphs(0).into_iter().enumerate() {
        let (stage, layer) = (i / per_stage, i % per_stage);
        for (b, ahc) in branches.into_iter().enumerate() {
            let Some(ahc) = ahc else { continue };
            let stem = format!("stage{stage}_layer{layer}_branch{b}");
            write_matrix_csv(out.join(format!("{stem}_incidence.csv")), &ahc.incidence)?;
            let weights = ahc.edge_weights.view().insert_axis(Axis(0)).to_owned();
            write_matrix_csv(out.join(format!("{stem}_edge_weights.csv")), &weights)?;
            shape = Some(ahc.incidence.dim());
            files += 1;
        }
    }
    let (rows, cols) = shape.unwrap_or((0, 0));
    Ok(format!("incidence_files={files}\nrows={rows}\ncols={cols}\nout={}\n", out.display()))
}
