use std::borrow::Cow;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, collate, DatasetManifest, ManifestEntry, SegSample, Split};
use crate::error::{Error, Result};
use crate::infer::evaluate_report;
use crate::metrics::IouReport;
use crate::model::{
    build_model, load_checkpoint, Checkpoint, CheckpointMeta, SegNet, ENCODER_PREFIX,
};
use crate::nn::{Mode, Module};
use crate::tensor::{Real, Tensor};
use crate::train::{cosine_lr, cross_entropy, Adam, GroupHyper, TrainConfig};
use crate::util::sha256_hex;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Samples held in memory or read from disk on demand.
#[derive(Clone, Debug)]
pub enum SampleSource {
    Memory(Vec<SegSample>),
    Disk(DatasetManifest, Vec<ManifestEntry>),
}

impl SampleSource {
    pub fn len(&self) -> usize {
        match self {
            SampleSource::Memory(v) => v.len(),
            SampleSource::Disk(_, e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<Cow<'_, SegSample>> {
        match self {
            SampleSource::Memory(v) => Ok(Cow::Borrowed(&v[i])),
            SampleSource::Disk(m, e) => m.load_sample(&e[i]).map(Cow::Owned),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Cow<'_, SegSample>>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Training and evaluation samples for [`fit`].
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: SampleSource,
    /// Scored after every epoch; the test split when it has samples.
    pub eval: SampleSource,
    pub eval_split: String,
    pub class_names: Vec<String>,
}

/// Datasets smaller than this many decoded bytes are kept in memory.
const IN_MEMORY_LIMIT: u64 = 512 << 20;

impl TrainData {
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let mut bytes = 0u64;
        for e in &m.entries {
            let p = m.root.join(&e.image);
            let (w, h) =
                image::image_dimensions(&p).map_err(|source| Error::Image { path: p, source })?;
            // f32 RGB plus label
            bytes += w as u64 * h as u64 * 13;
        }
        let source = |split| -> Result<SampleSource> {
            let entries: Vec<ManifestEntry> = m.split(split).cloned().collect();
            if bytes <= IN_MEMORY_LIMIT {
                entries
                    .iter()
                    .map(|e| m.load_sample(e))
                    .collect::<Result<_>>()
                    .map(SampleSource::Memory)
            } else {
                Ok(SampleSource::Disk(m.clone(), entries))
            }
        };
        let train = source(Split::Train)?;
        if train.is_empty() {
            return Err(Error::Dataset(format!(
                "{} has no training samples",
                m.root.display()
            )));
        }
        let test = source(Split::Test)?;
        let (eval, eval_split) = if test.is_empty() {
            (train.clone(), "train")
        } else {
            (test, "test")
        };
        Ok(TrainData {
            train,
            eval,
            eval_split: eval_split.into(),
            class_names: m.catalog.names(),
        })
    }

    pub fn in_memory(
        train: Vec<SegSample>,
        eval: Vec<SegSample>,
        class_names: Vec<String>,
    ) -> Self {
        TrainData {
            train: SampleSource::Memory(train),
            eval: SampleSource::Memory(eval),
            eval_split: "eval".into(),
            class_names,
        }
    }
}

/// Position in the schedule, stored in every checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub config_hash: String,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub global_step: u64,
    pub loss: f64,
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub eval_split: String,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub skipped_batches: usize,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub global_step: u64,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_report: Option<IouReport>,
    pub out_dir: PathBuf,
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub scored_pixels: usize,
    /// Every pixel was ignored; no update was made.
    pub skipped: bool,
}

/// Group settings: encoder parameters get the encoder rate and a weight
/// decay reduced by the same divisor.
pub fn group_hyper(cfg: &TrainConfig, lrs: (f64, f64)) -> impl Fn(&str) -> GroupHyper + '_ {
    move |path| {
        if path.starts_with(ENCODER_PREFIX) {
            GroupHyper {
                lr: lrs.1,
                weight_decay: cfg.encoder_weight_decay(),
            }
        } else {
            GroupHyper {
                lr: lrs.0,
                weight_decay: cfg.weight_decay,
            }
        }
    }
}

/// Forward, loss, backward and one Adam update.
pub fn train_step<T: Real>(
    model: &mut SegNet<T>,
    adam: &mut Adam<T>,
    input: &Tensor<T>,
    labels: &[u8],
    cfg: &TrainConfig,
    lrs: (f64, f64),
    batch_ids: &[String],
) -> Result<StepOutcome> {
    model.zero_grad();
    let logits = model.forward(input, Mode::Train)?;
    let out = cross_entropy(&logits, labels, cfg.ignore_id)?;
    if !out.loss.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss {} (lr_head {:e}, lr_encoder {:e}, batch {:?})",
            out.loss, lrs.0, lrs.1, batch_ids
        )));
    }
    if out.all_ignored {
        return Ok(StepOutcome {
            loss: 0.0,
            scored_pixels: 0,
            skipped: true,
        });
    }
    model.backward(&out.grad)?;
    adam.step(model, &group_hyper(cfg, lrs));
    Ok(StepOutcome {
        loss: out.loss,
        scored_pixels: out.scored_pixels,
        skipped: false,
    })
}

/// Hash of the settings a resumed run must share with the original.
pub fn config_hash(cfg: &TrainConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("serializable"))
}

/// Epoch order and per-sample augmentation seeds; a pure function of the
/// seed and the epoch so resumed runs see the same batches.
pub fn epoch_plan(seed: u64, epoch: usize, n: usize) -> Vec<(usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.into_iter().map(|i| (i, rng.random())).collect()
}

fn prepare_batch(
    data: &TrainData,
    cfg: &TrainConfig,
    plan: &[(usize, u64)],
) -> Result<(Tensor<f32>, Vec<u8>, Vec<String>)> {
    let aug = cfg.augment_config();
    let mut samples = Vec::with_capacity(plan.len());
    for &(i, seed) in plan {
        let s = data.train.get(i)?;
        samples.push(if cfg.augment {
            augment(&s, seed, &aug)?.0
        } else {
            s.into_owned()
        });
    }
    let refs: Vec<&SegSample> = samples.iter().collect();
    let (x, y) = collate::<f32>(&refs, &cfg.normalization, cfg.ignore_id)?;
    Ok((x, y, samples.into_iter().map(|s| s.id).collect()))
}

fn save(
    model: &SegNet<f32>,
    adam: &Adam<f32>,
    state: &TrainState,
    report: Option<&IouReport>,
    path: &Path,
) -> Result<()> {
    let (_, optimizer) = adam.state();
    let mut meta = CheckpointMeta {
        epoch: state.epoch,
        global_step: state.global_step,
        extra: serde_json::to_value(state)?,
        ..Default::default()
    };
    if let Some(r) = report {
        meta.metrics.insert("miou".into(), r.mean_iou);
        meta.metrics
            .insert("pixel_accuracy".into(), r.pixel_accuracy);
    }
    Checkpoint {
        model: Some(model.config().clone()),
        config_hash: Some(model.config().hash()),
        meta,
        tensors: model.state_dict(),
        optimizer,
    }
    .write(path)
}

fn append_log(path: &Path, line: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(line)?).map_err(|e| Error::io(path, e))
}

/// Keeps only log lines for epochs before `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .filter(|l| serde_json::from_str::<EpochLog>(l).is_ok_and(|e| e.epoch < epoch))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains on a dataset directory; see [`fit_with`].
pub fn fit(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resume: bool,
) -> Result<FitSummary> {
    cfg.validate()?;
    let data = TrainData::from_manifest(manifest)?;
    fit_with(cfg, &data, out_dir, resume, &mut |_| {})
}

/// Runs the epoch loop: shuffled, augmented batches; a cosine-annealed
/// learning rate per epoch; evaluation after each epoch; `last.ckpt` every
/// epoch and `best.ckpt` on a new best mean IoU. With `resume`, continues
/// from `out_dir/last.ckpt` on the identical schedule.
pub fn fit_with(
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
    resume: bool,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitSummary> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let hash = config_hash(cfg);
    let mut adam = Adam::<f32>::new(
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        cfg.decoupled_weight_decay,
    );

    let (mut model, mut state) = if resume {
        if !last_path.is_file() {
            return Err(Error::Checkpoint(format!(
                "cannot resume: {} does not exist",
                last_path.display()
            )));
        }
        let (model, ck) = load_checkpoint::<f32>(&last_path, Some(&cfg.model), false)?;
        let state: TrainState = serde_json::from_value(ck.meta.extra.clone()).map_err(|e| {
            Error::Checkpoint(format!("{}: no training state ({e})", last_path.display()))
        })?;
        if state.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different training config",
                last_path.display()
            )));
        }
        adam.load_state(state.global_step, &ck.optimizer)?;
        truncate_log(&log_path, state.epoch)?;
        (model, state)
    } else {
        if log_path.exists() {
            std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
        }
        let model = build_model::<f32>(&cfg.model, cfg.seed)?;
        let state = TrainState {
            config_hash: hash,
            ..Default::default()
        };
        (model, state)
    };
    std::fs::write(
        out_dir.join("train_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )
    .map_err(|e| Error::io(out_dir, e))?;

    let started = Instant::now();
    let mut epochs_run = 0;
    let mut final_report = None;
    let budget_left = |s: &TrainState| cfg.max_steps.is_none_or(|m| s.global_step < m);
    while state.epoch < cfg.epochs && budget_left(&state) {
        let epoch = state.epoch;
        let lrs = cosine_lr(epoch, cfg)?;
        (state.lr_head, state.lr_encoder) = lrs;
        let plan = epoch_plan(cfg.seed, epoch, data.train.len());
        let (mut loss_sum, mut steps, mut skipped) = (0.0, 0, 0);
        for chunk in plan.chunks(cfg.batch_size) {
            if !budget_left(&state) {
                break;
            }
            let (x, y, ids) = prepare_batch(data, cfg, chunk)?;
            let out = train_step(&mut model, &mut adam, &x, &y, cfg, lrs, &ids)?;
            state.global_step += 1;
            steps += 1;
            if out.skipped {
                skipped += 1;
            } else {
                loss_sum += out.loss;
            }
        }
        let report = evaluate_report(
            &mut model,
            data.eval.iter(),
            &cfg.normalization,
            cfg.ignore_id,
            &data.class_names,
        )?;
        state.epoch = epoch + 1;
        let improved = state.best_miou.is_none_or(|b| report.mean_iou > b);
        if improved {
            state.best_miou = Some(report.mean_iou);
            state.best_epoch = Some(epoch);
        }
        let line = EpochLog {
            epoch,
            steps,
            global_step: state.global_step,
            loss: if steps > skipped {
                loss_sum / (steps - skipped) as f64
            } else {
                0.0
            },
            lr_head: lrs.0,
            lr_encoder: lrs.1,
            eval_split: data.eval_split.clone(),
            miou: report.mean_iou,
            pixel_accuracy: report.pixel_accuracy,
            skipped_batches: skipped,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        append_log(&log_path, &line)?;
        save(&model, &adam, &state, Some(&report), &last_path)?;
        if improved {
            save(
                &model,
                &adam,
                &state,
                Some(&report),
                &out_dir.join(BEST_CHECKPOINT),
            )?;
        }
        on_epoch(&line);
        final_report = Some(report);
        epochs_run += 1;
    }
    Ok(FitSummary {
        epochs_run,
        global_step: state.global_step,
        best_miou: state.best_miou,
        best_epoch: state.best_epoch,
        final_report,
        out_dir: out_dir.to_path_buf(),
    })
}
