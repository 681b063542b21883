//! The experiment pipelines: BSS-GAN, ordinary GAN pre-training, the
//! supervised baselines and two-stage synthetic fine-tuning, together with
//! per-epoch evaluation, checkpointing and model selection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bssgan_tensor::{adam_step, AdamState, Checkpoint, Mode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, Pipeline, SelectRule};
use crate::data::{self, Dataset, ImageStore};
use crate::error::{config_err, Error, Result};
use crate::evaluation::{self, confusion, per_class_recall, ConfusionMatrix, MetricsReport};
use crate::losses::{self, SubBatches, SupervisedForm};
use crate::networks::{predict_classes, Network, NetworkSpec, Pass, NOISE_DIM};
use crate::sampling::{self, plan_balanced_batch, sample_noise, BatchPlan, DatasetIndex};

pub const CLASSIFIER_TAG: &str = "classifier";
pub const GENERATOR_TAG: &str = "generator";
pub const DISCRIMINATOR_TAG: &str = "discriminator";

const EVAL_CHUNK: usize = 256;
const GRID_TILES: usize = 8;

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Stream {
    InitD = 1,
    InitG = 2,
    Batches = 3,
    DropoutD = 4,
    Split = 5,
    Resample = 6,
    FixedNoise = 7,
}

fn stream(seed: u64, s: Stream, offset: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64 + 16 * offset);
    rng
}

/// Losses and batch composition of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_d_us: Option<f64>,
    pub loss_d_s: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_g_h: Option<f64>,
    pub loss_g_fm: Option<f64>,
    /// Labeled rows per class, then unlabeled rows, then generated rows.
    pub composition: Vec<usize>,
    /// Discriminator output of the D step, when recording is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: Option<f64>,
    pub recall: Vec<Option<f64>>,
    pub cm: Vec<Vec<u64>>,
}

impl SplitMetrics {
    fn from_confusion(cm: &ConfusionMatrix) -> Self {
        SplitMetrics { accuracy: cm.accuracy(), recall: per_class_recall(cm), cm: cm.counts.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub checkpoint: String,
    pub validation: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub pipeline: String,
    pub stage: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl TrainLog {
    fn new(pipeline: &str, stage: &str) -> Self {
        TrainLog { pipeline: pipeline.into(), stage: stage.into(), ..Default::default() }
    }

    /// Per-step losses as CSV.
    pub fn steps_csv(&self) -> String {
        let width = self.steps.first().map_or(0, |s| s.composition.len());
        let mut out = String::from("step,epoch,loss_d,loss_d_us,loss_d_s,loss_g,loss_g_h,loss_g_fm");
        for i in 0..width {
            write!(out, ",n{i}").unwrap();
        }
        out.push('\n');
        for s in &self.steps {
            write!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.step,
                s.epoch,
                s.loss_d,
                opt(s.loss_d_us),
                opt(s.loss_d_s),
                opt(s.loss_g),
                opt(s.loss_g_h),
                opt(s.loss_g_fm)
            )
            .unwrap();
            for c in &s.composition {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Write `steps.csv` and `epochs.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let steps = dir.join("steps.csv");
        fs::write(&steps, self.steps_csv()).map_err(|e| Error::io(&steps, e))?;
        let epochs = dir.join("epochs.json");
        let body = serde_json::to_string_pretty(&json!({
            "pipeline": self.pipeline,
            "stage": self.stage,
            "epochs": self.epochs,
        }))?;
        fs::write(&epochs, body + "\n").map_err(|e| Error::io(&epochs, e))
    }
}

/// What model selection maximizes and constrains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectCriteria {
    pub rule: SelectRule,
    /// Class whose recall is maximized (the smallest class).
    pub positive: usize,
    /// Class whose recall must exceed the threshold (the largest class).
    pub negative: usize,
    pub threshold: f64,
    pub on_test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub epoch: usize,
    pub checkpoint: String,
    pub target: Option<f64>,
    pub constraint: Option<f64>,
    /// No epoch met the constraint.
    pub fallback: bool,
}

fn selection_key(target: Option<f64>, constraint: Option<f64>, threshold: f64) -> (bool, f64, f64) {
    let t = target.unwrap_or(f64::NEG_INFINITY);
    let c = constraint.unwrap_or(f64::NEG_INFINITY);
    (c > threshold, t, c)
}

/// Index of the chosen epoch among `(target, constraint)` pairs: the
/// highest target among epochs whose constraint exceeds `threshold`, ties
/// going to the higher constraint and then the earlier epoch. With no
/// feasible epoch the highest target wins and the flag is set.
pub fn select_index(scores: &[(Option<f64>, Option<f64>)], threshold: f64) -> Option<(usize, bool)> {
    let mut best: Option<(usize, (bool, f64, f64))> = None;
    for (i, &(t, c)) in scores.iter().enumerate() {
        let key = selection_key(t, c, threshold);
        if best.is_none_or(|(_, b)| key.partial_cmp(&b) == Some(std::cmp::Ordering::Greater)) {
            best = Some((i, key));
        }
    }
    best.map(|(i, (feasible, _, _))| (i, !feasible))
}

fn epoch_scores(rec: &EpochRecord, crit: &SelectCriteria) -> Result<(Option<f64>, Option<f64>)> {
    let split = if crit.on_test { rec.test.as_ref() } else { rec.validation.as_ref().or(rec.test.as_ref()) };
    let Some(m) = split else {
        return config_err(format!("epoch {} has no metrics to select on", rec.epoch));
    };
    Ok((m.recall.get(crit.positive).copied().flatten(), m.recall.get(crit.negative).copied().flatten()))
}

pub fn select_best(log: &TrainLog, crit: &SelectCriteria) -> Result<Selection> {
    if log.epochs.is_empty() {
        return config_err("cannot select from an empty training log");
    }
    let scores = log.epochs.iter().map(|r| epoch_scores(r, crit)).collect::<Result<Vec<_>>>()?;
    let (i, fallback) = select_index(&scores, crit.threshold).expect("non-empty");
    if fallback {
        log::warn!(
            "no epoch reached constraint recall > {}; falling back to the highest target recall",
            crit.threshold
        );
    }
    let rec = &log.epochs[i];
    Ok(Selection {
        epoch: rec.epoch,
        checkpoint: rec.checkpoint.clone(),
        target: scores[i].0,
        constraint: scores[i].1,
        fallback,
    })
}

/// Data a trainer reads.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub store: &'a ImageStore,
    pub train: &'a DatasetIndex,
    pub validation: Option<&'a DatasetIndex>,
    pub test: Option<&'a DatasetIndex>,
}

/// Where and how a training run records itself.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Directory for `epoch_<n>/` checkpoints and sample grids; `None`
    /// keeps everything in memory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Store discriminator outputs and labels in every step record.
    pub record_probabilities: bool,
    pub criteria: SelectCriteria,
}

/// Result of training one classifier lineage.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub selection: Selection,
    /// Classifier weights of the selected epoch.
    pub selected: Network,
    /// Classifier weights after the last epoch.
    pub last: Network,
    pub generator: Option<Network>,
}

pub fn evaluate(net: &Network, store: &ImageStore, index: &DatasetIndex) -> Result<ConfusionMatrix> {
    let pairs = index.labeled();
    let k = index.k();
    let mut pred = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let ids: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let probs = net.infer(&store.batch(&ids)?, EVAL_CHUNK)?;
        pred.extend(predict_classes(&probs, k));
    }
    let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    confusion(&pred, &truth, k)
}

fn checkpoint_metadata(cfg: &ExperimentConfig, stage: &str, epoch: usize, classes: &[String]) -> serde_json::Value {
    json!({
        "pipeline": cfg.pipeline.id(),
        "stage": stage,
        "epoch": epoch,
        "k": cfg.k,
        "image_size": cfg.image_size,
        "classes": classes,
        "seed": cfg.seed,
    })
}

/// Per-epoch bookkeeping shared by the classifier pipelines.
struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    data: TrainData<'a>,
    log: TrainLog,
    scores: Vec<(Option<f64>, Option<f64>)>,
    best: Option<(usize, Network)>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a ExperimentConfig, opts: &'a RunOptions, data: TrainData<'a>, stage: &str) -> Self {
        Recorder { cfg, opts, data, log: TrainLog::new(cfg.pipeline.id(), stage), scores: Vec::new(), best: None }
    }

    fn end_epoch(&mut self, epoch: usize, classifier: &Network, state: &AdamState, gan: Option<(&Network, &AdamState)>) -> Result<()> {
        let eval = |idx: Option<&DatasetIndex>| -> Result<Option<SplitMetrics>> {
            idx.map(|i| evaluate(classifier, self.data.store, i).map(|cm| SplitMetrics::from_confusion(&cm))).transpose()
        };
        let checkpoint = format!("epoch_{epoch}");
        let rec = EpochRecord { epoch, checkpoint: checkpoint.clone(), validation: eval(self.data.validation)?, test: eval(self.data.test)? };
        if let Some(dir) = &self.opts.checkpoint_dir {
            let mut ck = Checkpoint::new(checkpoint_metadata(self.cfg, &self.log.stage, epoch, &self.data.train.class_names));
            ck.add_network(CLASSIFIER_TAG, &classifier.fingerprint(), &classifier.params, Some(state));
            if let Some((g, gs)) = gan {
                ck.add_network(GENERATOR_TAG, &g.fingerprint(), &g.params, Some(gs));
            }
            ck.save(&dir.join(&checkpoint))?;
        }
        let score = epoch_scores(&rec, &self.opts.criteria)?;
        self.scores.push(score);
        let (i, _) = select_index(&self.scores, self.opts.criteria.threshold).expect("non-empty");
        if i + 1 == self.scores.len() {
            self.best = Some((epoch, classifier.clone()));
        }
        log::info!(
            "{} {} epoch {epoch}: target recall {} constraint recall {}",
            self.log.pipeline,
            self.log.stage,
            opt(score.0),
            opt(score.1)
        );
        self.log.epochs.push(rec);
        Ok(())
    }

    fn finish(self, last: Network, generator: Option<Network>) -> Result<TrainOutcome> {
        let selection = select_best(&self.log, &self.opts.criteria)?;
        let (epoch, selected) = self.best.expect("at least one epoch");
        debug_assert_eq!(epoch, selection.epoch);
        Ok(TrainOutcome { log: self.log, selection, selected, last, generator })
    }
}

fn check_finite(v: f64, what: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} became {v} at step {step}; training aborted")))
    }
}

fn write_grid(dir: Option<&PathBuf>, generator: &Network, noise: &Tensor<f32>, epoch: usize, size: usize) -> Result<()> {
    if let Some(dir) = dir {
        let imgs = generator.infer(noise, GRID_TILES * GRID_TILES)?;
        evaluation::write_sample_grid(&dir.join("samples").join(format!("epoch_{epoch}.png")), imgs.data(), size, GRID_TILES)?;
    }
    Ok(())
}

/// Generator output on a fresh tape in train mode, as plain values.
fn generate_detached(generator: &Network, noise: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let z = tape.constant(noise.clone());
    let mut pass: Pass<'_, ChaCha8Rng> = Pass { mode: Mode::Train, trainable: false, rng: None };
    let out = generator.forward(&mut tape, z, &mut pass)?;
    Ok(tape.value(out.output).clone())
}

/// One BSS-GAN step: a discriminator update on the balanced batch followed
/// by a generator update from a fresh generator forward pass.
#[allow(clippy::too_many_arguments)]
fn bss_gan_step<R: Rng>(
    d: &mut Network,
    g: &mut Network,
    d_state: &mut AdamState,
    g_state: &mut AdamState,
    store: &ImageStore,
    index: &DatasetIndex,
    plan: &BatchPlan,
    form: SupervisedForm,
    lr: f64,
    batches: &mut R,
    dropout: &mut R,
    step: usize,
    record: bool,
) -> Result<StepRecord> {
    let batch = sampling::draw_balanced_batch(index, plan, batches)?;
    let real = store.batch(&batch.real_ids())?;
    let n_real = plan.n_l + plan.n_ul;
    let sub = SubBatches::from(plan);

    // discriminator
    let fake = generate_detached(g, &batch.noise)?;
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::concat_rows(&[&real, &fake])?);
    let out = d.forward(&mut tape, x, &mut Pass { mode: Mode::Train, trainable: true, rng: Some(&mut *dropout) })?;
    let d_loss = losses::d_total(&mut tape, out.output, &batch.labels, sub, form)?;
    let d_val = d_loss.value(&tape);
    check_finite(d_val.scalar, "discriminator loss", step)?;
    let probs = record.then(|| tape.value(out.output).data().to_vec());
    let grads = tape.backward(d_loss.total)?;
    adam_step(&mut d.params, &grads.named(), d_state, lr)?;
    d.update_running_stats(&out.bn_stats)?;

    // generator
    let mut tape = Tape::<f32>::new();
    let z = tape.constant(batch.noise.clone());
    let mut g_pass: Pass<'_, R> = Pass { mode: Mode::Train, trainable: true, rng: None };
    let gen = g.forward(&mut tape, z, &mut g_pass)?;
    let r = tape.constant(real);
    let x = tape.concat_rows(&[r, gen.output])?;
    let out = d.forward(&mut tape, x, &mut Pass { mode: Mode::Train, trainable: false, rng: Some(&mut *dropout) })?;
    let feats = out.features.expect("discriminator exposes features");
    let f_real = tape.slice_rows(feats, 0, n_real)?;
    let f_gen = tape.slice_rows(feats, n_real, plan.n_g)?;
    let p_gen = tape.slice_rows(out.output, n_real, plan.n_g)?;
    let g_loss = losses::g_total(&mut tape, p_gen, f_real, f_gen)?;
    let g_val = g_loss.value(&tape);
    check_finite(g_val.scalar, "generator loss", step)?;
    let grads = tape.backward(g_loss.total)?;
    adam_step(&mut g.params, &grads.named(), g_state, lr)?;
    g.update_running_stats(&gen.bn_stats)?;

    let mut composition = batch.label_counts(plan.k);
    composition.extend([plan.n_ul, plan.n_g]);
    Ok(StepRecord {
        step,
        epoch: 0,
        loss_d: d_val.scalar,
        loss_d_us: Some(d_val.component("unsupervised")),
        loss_d_s: Some(d_val.component("supervised")),
        loss_g: Some(g_val.scalar),
        loss_g_h: Some(g_val.component("heuristic")),
        loss_g_fm: Some(g_val.component("feature_matching")),
        composition,
        probs,
        labels: record.then_some(batch.labels),
    })
}

/// Balanced semi-supervised GAN training. The discriminator has `K + 1`
/// outputs and doubles as the classifier.
pub fn train_bss_gan(cfg: &ExperimentConfig, data: TrainData<'_>, opts: &RunOptions) -> Result<TrainOutcome> {
    let k = data.train.k();
    let plan = plan_balanced_batch(k, cfg.n_l, cfg.c)?;
    let mut d = Network::discriminator(cfg.image_size, k + 1, &mut stream(cfg.seed, Stream::InitD, 0))?;
    let mut g = Network::generator(NOISE_DIM, cfg.image_size, &mut stream(cfg.seed, Stream::InitG, 0))?;
    let (mut d_state, mut g_state) = (AdamState::new(), AdamState::new());
    let mut batches = stream(cfg.seed, Stream::Batches, 0);
    let mut dropout = stream(cfg.seed, Stream::DropoutD, 0);
    let fixed = sample_noise(GRID_TILES * GRID_TILES, &mut stream(cfg.seed, Stream::FixedNoise, 0));
    let per_epoch = sampling::epoch_schedule(data.train, &plan);
    let mut rec = Recorder::new(cfg, opts, data, "main");
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for _ in 0..per_epoch {
            step += 1;
            let mut s = bss_gan_step(
                &mut d,
                &mut g,
                &mut d_state,
                &mut g_state,
                data.store,
                data.train,
                &plan,
                cfg.supervised_form,
                cfg.lr,
                &mut batches,
                &mut dropout,
                step,
                opts.record_probabilities,
            )?;
            s.epoch = epoch;
            rec.log.steps.push(s);
        }
        write_grid(opts.checkpoint_dir.as_ref(), &g, &fixed, epoch, cfg.image_size)?;
        rec.end_epoch(epoch, &d, &d_state, Some((&g, &g_state)))?;
    }
    rec.finish(d, Some(g))
}

/// Classification loss of the supervised pipelines.
#[derive(Clone, Debug, PartialEq)]
pub enum SupervisedLoss {
    Plain,
    Balanced { alpha: Vec<f64> },
    Focal { alpha: Vec<f64>, gamma: f64 },
}

impl SupervisedLoss {
    /// Loss for a pipeline, with reverse-frequency weights from `counts`.
    pub fn for_pipeline(cfg: &ExperimentConfig, counts: &[usize]) -> Result<Self> {
        Ok(match cfg.pipeline {
            Pipeline::BslBce => SupervisedLoss::Balanced { alpha: losses::reverse_frequency_weights(counts)? },
            Pipeline::BslFocal => {
                SupervisedLoss::Focal { alpha: losses::reverse_frequency_weights(counts)?, gamma: cfg.focal_gamma }
            }
            _ => SupervisedLoss::Plain,
        })
    }
}

/// Minibatch training of a `K`-way classifier over shuffled epochs of the
/// training index. `init` continues from existing weights.
pub fn train_supervised(
    cfg: &ExperimentConfig,
    data: TrainData<'_>,
    loss: &SupervisedLoss,
    opts: &RunOptions,
    init: Option<Network>,
    stage: &str,
) -> Result<TrainOutcome> {
    let k = data.train.k();
    let offset = u64::from(stage == "stage1");
    let mut net = match init {
        Some(n) => n,
        None => Network::discriminator(cfg.image_size, k, &mut stream(cfg.seed, Stream::InitD, offset))?,
    };
    if net.spec != NetworkSpec::discriminator(cfg.image_size, k)? {
        return config_err("initial classifier does not match the configured architecture");
    }
    let mut state = AdamState::new();
    let mut batches = stream(cfg.seed, Stream::Batches, offset);
    let mut dropout = stream(cfg.seed, Stream::DropoutD, offset);
    let mut pairs = data.train.labeled();
    if pairs.is_empty() {
        return config_err("training index has no labeled samples");
    }
    let mut rec = Recorder::new(cfg, opts, data, stage);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        pairs.shuffle(&mut batches);
        for chunk in pairs.chunks(cfg.n_l) {
            step += 1;
            let ids: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(data.store.batch(&ids)?);
            let out = net.forward(&mut tape, x, &mut Pass { mode: Mode::Train, trainable: true, rng: Some(&mut dropout) })?;
            let term = match loss {
                SupervisedLoss::Plain => losses::balanced_cross_entropy(&mut tape, out.output, &labels, &vec![1.0; k])?,
                SupervisedLoss::Balanced { alpha } => losses::balanced_cross_entropy(&mut tape, out.output, &labels, alpha)?,
                SupervisedLoss::Focal { alpha, gamma } => losses::focal_loss(&mut tape, out.output, &labels, alpha, *gamma)?,
            };
            let value = term.value(&tape).scalar;
            check_finite(value, "classification loss", step)?;
            let grads = tape.backward(term.total)?;
            adam_step(&mut net.params, &grads.named(), &mut state, cfg.lr)?;
            net.update_running_stats(&out.bn_stats)?;
            let mut composition = vec![0; k];
            for &y in &labels {
                composition[y] += 1;
            }
            composition.extend([0, 0]);
            rec.log.steps.push(StepRecord {
                step,
                epoch,
                loss_d: value,
                loss_d_us: None,
                loss_d_s: None,
                loss_g: None,
                loss_g_h: None,
                loss_g_fm: None,
                composition,
                probs: opts.record_probabilities.then(|| tape.value(out.output).data().to_vec()),
                labels: opts.record_probabilities.then_some(labels),
            });
        }
        rec.end_epoch(epoch, &net, &state, None)?;
    }
    let last = net.clone();
    rec.finish(last, None)
}

/// A trained ordinary GAN.
#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub generator: Network,
    pub discriminator: Network,
    pub log: TrainLog,
}

/// Two-player GAN on the images `ids`, with a 2-way discriminator
/// (column 0 real, column 1 synthetic). Each step uses `n_l / 2` real and
/// `n_l / 2` generated images; an epoch covers the pool once in
/// expectation. Checkpoints go to `dir/epoch_<n>/` when `dir` is given.
pub fn train_ordinary_gan(
    cfg: &ExperimentConfig,
    store: &ImageStore,
    ids: &[usize],
    epochs: usize,
    stream_offset: u64,
    dir: Option<&Path>,
) -> Result<GanOutcome> {
    if ids.is_empty() {
        return config_err("ordinary GAN needs at least one training image");
    }
    let half = (cfg.n_l / 2).max(1);
    let off = 2 + stream_offset;
    let mut d = Network::discriminator(cfg.image_size, 2, &mut stream(cfg.seed, Stream::InitD, off))?;
    let mut g = Network::generator(NOISE_DIM, cfg.image_size, &mut stream(cfg.seed, Stream::InitG, off))?;
    let (mut d_state, mut g_state) = (AdamState::new(), AdamState::new());
    let mut batches = stream(cfg.seed, Stream::Batches, off);
    let mut dropout = stream(cfg.seed, Stream::DropoutD, off);
    let fixed = sample_noise(GRID_TILES * GRID_TILES, &mut stream(cfg.seed, Stream::FixedNoise, off));
    let per_epoch = ids.len().div_ceil(half);
    let mut log = TrainLog::new(cfg.pipeline.id(), "gan");
    let mut step = 0;
    for epoch in 1..=epochs {
        for _ in 0..per_epoch {
            step += 1;
            let real_ids: Vec<usize> = (0..half).map(|_| ids[batches.random_range(0..ids.len())]).collect();
            let real = store.batch(&real_ids)?;
            let noise = sample_noise(half, &mut batches);

            let fake = generate_detached(&g, &noise)?;
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::concat_rows(&[&real, &fake])?);
            let out = d.forward(&mut tape, x, &mut Pass { mode: Mode::Train, trainable: true, rng: Some(&mut dropout) })?;
            let pr = tape.slice_rows(out.output, 0, half)?;
            let pg = tape.slice_rows(out.output, half, half)?;
            let (d_loss, _) = losses::ordinary_gan_losses(&mut tape, pr, pg)?;
            let d_val = d_loss.value(&tape).scalar;
            check_finite(d_val, "discriminator loss", step)?;
            let grads = tape.backward(d_loss.total)?;
            adam_step(&mut d.params, &grads.named(), &mut d_state, cfg.lr)?;
            d.update_running_stats(&out.bn_stats)?;

            let mut tape = Tape::<f32>::new();
            let z = tape.constant(noise);
            let mut g_pass: Pass<'_, ChaCha8Rng> = Pass { mode: Mode::Train, trainable: true, rng: None };
            let gen = g.forward(&mut tape, z, &mut g_pass)?;
            let r = tape.constant(real);
            let x = tape.concat_rows(&[r, gen.output])?;
            let out = d.forward(&mut tape, x, &mut Pass { mode: Mode::Train, trainable: false, rng: Some(&mut dropout) })?;
            let pr = tape.slice_rows(out.output, 0, half)?;
            let pg = tape.slice_rows(out.output, half, half)?;
            let (_, g_loss) = losses::ordinary_gan_losses(&mut tape, pr, pg)?;
            let g_val = g_loss.value(&tape).scalar;
            check_finite(g_val, "generator loss", step)?;
            let grads = tape.backward(g_loss.total)?;
            adam_step(&mut g.params, &grads.named(), &mut g_state, cfg.lr)?;
            g.update_running_stats(&gen.bn_stats)?;

            log.steps.push(StepRecord {
                step,
                epoch,
                loss_d: d_val,
                loss_d_us: None,
                loss_d_s: None,
                loss_g: Some(g_val),
                loss_g_h: None,
                loss_g_fm: None,
                composition: vec![half, half],
                probs: None,
                labels: None,
            });
        }
        let checkpoint = format!("epoch_{epoch}");
        if let Some(dir) = dir {
            let mut ck = Checkpoint::new(json!({"pipeline": cfg.pipeline.id(), "stage": "gan", "epoch": epoch, "image_size": cfg.image_size}));
            ck.add_network(GENERATOR_TAG, &g.fingerprint(), &g.params, Some(&g_state));
            ck.add_network(DISCRIMINATOR_TAG, &d.fingerprint(), &d.params, Some(&d_state));
            ck.save(&dir.join(&checkpoint))?;
            write_grid(Some(&dir.to_path_buf()), &g, &fixed, epoch, cfg.image_size)?;
        }
        log.epochs.push(EpochRecord { epoch, checkpoint, validation: None, test: None });
    }
    Ok(GanOutcome { generator: g, discriminator: d, log })
}

/// Load the generator stored in a checkpoint directory.
pub fn load_generator(dir: &Path, image_size: usize) -> Result<Network> {
    let ck = Checkpoint::load(dir)?;
    if !ck.has_network(GENERATOR_TAG) {
        return config_err(format!("checkpoint {} holds no generator parameters", dir.display()));
    }
    let spec = NetworkSpec::generator(NOISE_DIM, image_size)?;
    let (params, _) = ck.network(GENERATOR_TAG, &spec.fingerprint())?;
    Ok(Network { spec, params })
}

/// `n` generator samples from noise drawn with `seed`.
pub fn generate_images(generator: &Network, n: usize, seed: u64) -> Result<Tensor<f32>> {
    if n == 0 {
        return config_err("number of samples must be positive");
    }
    let noise = sample_noise(n, &mut ChaCha8Rng::seed_from_u64(seed));
    generator.infer(&noise, 64)
}

/// Load the deployed classifier of a checkpoint, checking it against the
/// architecture implied by `pipeline`, `k` and `image_size`.
pub fn load_classifier(dir: &Path, pipeline: Pipeline, k: usize, image_size: usize) -> Result<Network> {
    let ck = Checkpoint::load(dir)?;
    let spec = NetworkSpec::discriminator(image_size, pipeline.classifier_outputs(k))?;
    let (params, _) = ck.network(CLASSIFIER_TAG, &spec.fingerprint())?;
    Ok(Network { spec, params })
}

/// Everything a finished experiment produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub logs: Vec<TrainLog>,
    pub selection: Selection,
    pub report: MetricsReport,
    pub classifier: Network,
    pub generator: Option<Network>,
    pub artifacts: Vec<PathBuf>,
}

/// Training, validation and test indices after the configured splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub store: ImageStore,
    pub train: DatasetIndex,
    pub validation: Option<DatasetIndex>,
    pub test: DatasetIndex,
    pub positive: usize,
    pub negative: usize,
}

/// Hold out the validation split and apply the labeled/unlabeled fractions.
pub fn prepare_data(cfg: &ExperimentConfig, dataset: Dataset) -> Result<PreparedData> {
    let Dataset { store, train, test } = dataset;
    if train.k() != cfg.k {
        return config_err(format!("config k = {} but the dataset has {} classes", cfg.k, train.k()));
    }
    if store.size() != cfg.image_size {
        return config_err(format!("dataset images are {} px, config says {}", store.size(), cfg.image_size));
    }
    let positive = train.minority_class();
    let negative = train.majority_class();
    let split_seed = stream(cfg.seed, Stream::Split, 0).random();
    let (mut train, validation) = if !cfg.select_on_test && cfg.validation_fraction > 0.0 {
        let (t, v) = data::stratified_holdout(&train, cfg.validation_fraction, split_seed)?;
        (t, Some(v))
    } else {
        (train, None)
    };
    if cfg.labeled_fraction < 1.0 {
        train = data::make_hybrid(&train, cfg.labeled_fraction, split_seed ^ 1)?;
    }
    if cfg.unlabeled_fraction < 1.0 {
        train = data::subsample_unlabeled(&train, cfg.unlabeled_fraction, split_seed ^ 2)?;
    }
    Ok(PreparedData { store, train, validation, test, positive, negative })
}

fn criteria(cfg: &ExperimentConfig, p: &PreparedData) -> SelectCriteria {
    SelectCriteria {
        rule: cfg.rule(),
        positive: p.positive,
        negative: p.negative,
        threshold: cfg.select_threshold,
        on_test: cfg.select_on_test,
    }
}

/// Synthesize `count` images of every class in `classes` with per-class
/// ordinary GANs, returning the updated index.
fn gan_oversample(
    cfg: &ExperimentConfig,
    store: &mut ImageStore,
    index: &DatasetIndex,
    targets: &[(usize, usize)],
    out_dir: &Path,
    base: DatasetIndex,
) -> Result<DatasetIndex> {
    let mut result = base;
    let mut rng = stream(cfg.seed, Stream::Resample, 1);
    for &(class, count) in targets {
        if count == 0 {
            continue;
        }
        let name = &index.class_names[class];
        let ck_dir = cfg.save_checkpoints.then(|| cfg.out_dir.join(format!("gan_{name}")));
        let gan = train_ordinary_gan(cfg, store, &index.classes[class], cfg.gan_epochs(), class as u64, ck_dir.as_deref())?;
        if let Some(d) = &ck_dir {
            gan.log.write(d)?;
        }
        result = sampling::oversample_gan(store, &result, &gan.generator, class, count, out_dir, &mut rng)?;
    }
    Ok(result)
}

/// Run a configured experiment on an already loaded dataset, writing logs
/// and the selected model's test metrics under `cfg.out_dir`.
pub fn run_with_dataset(cfg: &ExperimentConfig, dataset: Dataset) -> Result<RunResult> {
    cfg.validate()?;
    let mut p = prepare_data(cfg, dataset)?;
    let crit = criteria(cfg, &p);
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ck = |sub: Option<&str>| -> Option<PathBuf> {
        cfg.save_checkpoints.then(|| sub.map_or_else(|| out.clone(), |s| out.join(s)))
    };
    let opts = RunOptions { checkpoint_dir: ck(None), record_probabilities: false, criteria: crit };
    let mut resample = stream(cfg.seed, Stream::Resample, 0);

    let (logs, outcome) = match cfg.pipeline {
        Pipeline::BssGan => {
            let data = TrainData { store: &p.store, train: &p.train, validation: p.validation.as_ref(), test: Some(&p.test) };
            let o = train_bss_gan(cfg, data, &opts)?;
            (vec![o.log.clone()], o)
        }
        Pipeline::BslSdf => {
            let max = p.train.class_counts().into_iter().max().unwrap_or(0);
            let targets: Vec<(usize, usize)> = (0..p.train.k()).map(|c| (c, max)).collect();
            let empty = DatasetIndex::new(p.train.class_names.clone(), p.train.image_size, vec![vec![]; p.train.k()], vec![])?;
            let train = p.train.clone();
            let synthetic = gan_oversample(cfg, &mut p.store, &train, &targets, &out.join("sdf_synthetic"), empty)?;
            let loss = SupervisedLoss::Plain;
            let s1_opts = RunOptions { checkpoint_dir: ck(Some("stage1")), ..opts.clone() };
            let data1 = TrainData { store: &p.store, train: &synthetic, validation: p.validation.as_ref(), test: Some(&p.test) };
            let s1 = train_supervised(cfg, data1, &loss, &s1_opts, None, "stage1")?;
            let s2_opts = RunOptions { checkpoint_dir: ck(Some("stage2")), ..opts.clone() };
            let data2 = TrainData { store: &p.store, train: &p.train, validation: p.validation.as_ref(), test: Some(&p.test) };
            let s2 = train_supervised(cfg, data2, &loss, &s2_opts, Some(s1.last.clone()), "stage2")?;
            (vec![s1.log, s2.log.clone()], s2)
        }
        pipeline => {
            let train = match pipeline {
                Pipeline::Bus => sampling::undersample(&p.train, &mut resample)?,
                Pipeline::BosDa => sampling::oversample_da(&mut p.store, &p.train, &cfg.da, &mut resample)?,
                Pipeline::BosGan => {
                    let targets: Vec<(usize, usize)> =
                        (0..p.train.k()).map(|c| (c, sampling::balance_deficit(&p.train, c))).collect();
                    let base = p.train.clone();
                    gan_oversample(cfg, &mut p.store, &base, &targets, &out.join("synthetic"), base.clone())?
                }
                _ => p.train.clone(),
            };
            let loss = SupervisedLoss::for_pipeline(cfg, &train.class_counts())?;
            let data = TrainData { store: &p.store, train: &train, validation: p.validation.as_ref(), test: Some(&p.test) };
            let o = train_supervised(cfg, data, &loss, &opts, None, "main")?;
            (vec![o.log.clone()], o)
        }
    };

    let mut artifacts = Vec::new();
    for log in &logs {
        let dir = if logs.len() > 1 { out.join(&log.stage) } else { out.clone() };
        log.write(&dir)?;
        artifacts.push(dir.join("steps.csv"));
        artifacts.push(dir.join("epochs.json"));
    }
    let sel_path = out.join("selection.json");
    fs::write(&sel_path, serde_json::to_string_pretty(&outcome.selection)? + "\n").map_err(|e| Error::io(&sel_path, e))?;
    artifacts.push(sel_path);

    let cm = evaluate(&outcome.selected, &p.store, &p.test)?;
    let ck_ref = match cfg.pipeline {
        Pipeline::BslSdf => format!("stage2/{}", outcome.selection.checkpoint),
        _ => outcome.selection.checkpoint.clone(),
    };
    let report =
        MetricsReport::from_confusion(cfg.pipeline.id(), &ck_ref, &p.test.class_names, &cm, p.positive, p.negative, &cfg.eval_betas)?;
    artifacts.extend(evaluation::emit_report(&report, &evaluation::DEFAULT_SWEEP, out)?);
    Ok(RunResult { logs, selection: outcome.selection, report, classifier: outcome.selected, generator: outcome.generator, artifacts })
}

/// Load `cfg.dataset_root` and run the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let dataset = data::load_dataset(&cfg.dataset_root, cfg.image_size)?;
    run_with_dataset(cfg, dataset)
}
