//! `bssgan`: synthesize datasets, train, evaluate and sample generators.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bssgan::config::{ExperimentConfig, Pipeline};
use bssgan::data::{self, SplitSpec, SurfaceClass};
use bssgan::evaluation::{self, MetricsReport};
use bssgan::trainer;
use bssgan::{Error, Result};
use bssgan_tensor::Checkpoint;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "bssgan", version, about = "Balanced semi-supervised GAN lab for imbalanced image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural dataset in the standard directory layout.
    SynthData(SynthArgs),
    /// Run one experiment from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Sample images from a generator checkpoint.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per class before splitting, e.g. 1440,90,45.
    #[arg(long, value_delimiter = ',', required = true)]
    counts: Vec<usize>,
    /// Class kinds matching --counts (ud, cr, sp); defaults to ud,cr,sp.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train:test parts, e.g. 2:1. Use 1:0 for a single train split.
    #[arg(long, default_value = "2:1")]
    split: String,
    /// Keep this fraction of training images labeled and move the rest to
    /// train/_unlabeled.
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    pipeline: Option<Pipeline>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// A checkpoint directory such as runs/x/epoch_12.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding train/ and test/.
    #[arg(long)]
    data: PathBuf,
    /// Experiment config whose architecture the checkpoint must match;
    /// defaults to the checkpoint's own metadata.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,5")]
    betas: Vec<f64>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory; defaults to <checkpoint>/eval.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Image size; defaults to the checkpoint metadata.
    #[arg(long)]
    size: Option<usize>,
}

fn parse_split(s: &str) -> Result<(usize, usize)> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad split '{s}', expected e.g. 2:1")));
    match s.split_once(':') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => Err(Error::Config(format!("bad split '{s}', expected e.g. 2:1"))),
    }
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    let non_empty = out.is_dir() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Config(format!("{} exists and is not empty; pass --force to replace it", out.display())));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    let kinds = if a.classes.is_empty() {
        SurfaceClass::defaults(a.counts.len())?
    } else {
        a.classes.iter().map(|c| SurfaceClass::parse(c)).collect::<Result<Vec<_>>>()?
    };
    let (train_parts, test_parts) = parse_split(&a.split)?;
    if train_parts == 0 {
        return Err(Error::Config("split needs a non-zero train part".into()));
    }
    let settings = json!({
        "counts": a.counts, "classes": kinds, "size": a.size, "seed": a.seed,
        "split": [train_parts, test_parts], "labeled_fraction": a.labeled_fraction,
    });
    let run = RunManifest::start("synth-data", &settings, a.seed);
    prepare_out_dir(&a.out, a.force)?;
    let (store, index) = data::make_procedural(&kinds, &a.counts, a.size, a.seed)?;
    let (mut train, test) = if test_parts == 0 {
        (index, None)
    } else {
        let (tr, te) = data::make_split(&index, &SplitSpec { train_parts, test_parts, seed: a.seed })?;
        (tr, Some(te))
    };
    if let Some(f) = a.labeled_fraction {
        train = data::make_hybrid(&train, f, a.seed)?;
    }
    let mut artifacts = data::materialize(&store, &train, &a.out.join("train"))?;
    if let Some(test) = &test {
        artifacts.extend(data::materialize(&store, test, &a.out.join("test"))?);
    }
    data::write_dataset_manifest(&a.out, &train.class_names, a.size, Some(a.seed), &a.counts)?;
    log::info!("wrote {} images to {}", artifacts.len(), a.out.display());
    artifacts.push(a.out.join(data::DATASET_MANIFEST));
    run.finish(&a.out, artifacts)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(p) = a.pipeline {
        cfg.pipeline = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(d) = &a.dataset_root {
        cfg.dataset_root = d.clone();
    }
    if let Some(o) = &a.out_dir {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    if !cfg.dataset_root.join("train").is_dir() {
        return Err(Error::Data(format!(
            "dataset_root {} has no train/ directory; create one with `bssgan synth-data` or point dataset_root at a dataset",
            cfg.dataset_root.display()
        )));
    }
    let settings: serde_json::Value = serde_json::from_str(&cfg.to_json())?;
    let run = RunManifest::start("train", &settings, cfg.seed);
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let cfg_path = cfg.out_dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    let result = trainer::run_experiment(&cfg)?;
    log::info!(
        "{}: selected {} (tpr {:?}, tnr {:?})",
        cfg.pipeline,
        result.selection.checkpoint,
        result.report.tpr,
        result.report.tnr
    );
    let mut artifacts = vec![cfg_path];
    artifacts.extend(result.artifacts);
    run.finish(&cfg.out_dir, artifacts)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let meta = &ck.metadata;
    let (pipeline, k, size) = match &a.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            (cfg.pipeline, cfg.k, cfg.image_size)
        }
        None => {
            let pipeline: Pipeline = meta["pipeline"].as_str().unwrap_or_default().parse()?;
            let k = meta["k"].as_u64().ok_or_else(|| Error::Config("checkpoint metadata lacks k; pass --config".into()))?;
            let size = meta["image_size"].as_u64().ok_or_else(|| Error::Config("checkpoint metadata lacks image_size".into()))?;
            (pipeline, k as usize, size as usize)
        }
    };
    let classifier = trainer::load_classifier(&a.checkpoint, pipeline, k, size)?;
    let dataset = data::load_dataset(&a.data, size)?;
    let index = match a.split.as_str() {
        "test" => &dataset.test,
        "train" => &dataset.train,
        other => return Err(Error::Config(format!("unknown split '{other}' (train or test)"))),
    };
    if index.k() != k {
        return Err(Error::Config(format!("dataset has {} classes, checkpoint expects {k}", index.k())));
    }
    let settings = json!({
        "checkpoint": a.checkpoint, "data": a.data, "betas": a.betas, "split": a.split,
        "fingerprint": classifier.fingerprint(),
    });
    let run = RunManifest::start("eval", &settings, meta["seed"].as_u64().unwrap_or(0));
    let cm = trainer::evaluate(&classifier, &dataset.store, index)?;
    let ck_ref = a.checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let report = MetricsReport::from_confusion(
        pipeline.id(),
        &ck_ref,
        &index.class_names,
        &cm,
        dataset.train.minority_class(),
        dataset.train.majority_class(),
        &a.betas,
    )?;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.join("eval"));
    let artifacts = evaluation::emit_report(&report, &evaluation::DEFAULT_SWEEP, &out)?;
    log::info!("accuracy {:?} tpr {:?} tnr {:?}", report.accuracy, report.tpr, report.tnr);
    run.finish(&out, artifacts)
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let size = match a.size {
        Some(s) => s,
        None => ck.metadata["image_size"]
            .as_u64()
            .ok_or_else(|| Error::Config("checkpoint metadata lacks image_size; pass --size".into()))? as usize,
    };
    let generator = trainer::load_generator(&a.checkpoint, size)?;
    let settings = json!({"checkpoint": a.checkpoint, "n": a.n, "seed": a.seed, "size": size});
    let run = RunManifest::start("generate", &settings, a.seed);
    let images = trainer::generate_images(&generator, a.n, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut artifacts = Vec::with_capacity(a.n + 1);
    for (i, px) in images.data().chunks_exact(size * size * 3).enumerate() {
        let path = a.out.join(format!("gan_{i:06}.png"));
        data::save_png(&path, px, size)?;
        artifacts.push(path);
    }
    let grid = a.out.join("grid.png");
    evaluation::write_sample_grid(&grid, images.data(), size, 8)?;
    artifacts.push(grid);
    run.finish(&a.out, artifacts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
