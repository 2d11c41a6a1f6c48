//! The four training stages and the loop they share.
//!
//! * S1: one plain network per anatomy ([`train_independent`]); the plain
//!   mixed-anatomy baseline ([`train_shared`]) reuses the S2 schedule.
//! * S2: universal network with a normalization bank, round-robin
//!   single-anatomy batches ([`pretrain_universal`]).
//! * S3: S2 continued with an attention-transfer term against frozen S1
//!   teachers ([`distill_universal`]).
//! * S4: a new anatomy's affine set inserted and trained alone
//!   ([`adapt_new_anatomy`]).
//!
//! Every stage selects the epoch with the lowest mean validation MAE, with
//! the starting weights counted as epoch 0.

mod config;
mod eval;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::at_loss_grad;
use crate::error::{Error, Result};
use crate::io_store::{
    save_checkpoint, CheckpointMeta, MetricRow, RunManifest, Stage, Variant, CHECKPOINT_MANIFEST, RUN_MANIFEST,
};
use crate::kspace::{undersample, zero_filled, ImageTensor, KSpaceTensor, SamplingMask};
use crate::phantom_data::{AnatomyData, Split};
use crate::recon_net::{CascadeModel, Gradients};

pub use config::{MaskPolicy, TrainConfig};
pub use eval::{evaluate, EvalSpec, Reconstructor};
pub use optim::Adam;

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_MASK: u64 = 0x4d41_534b;
const TAG_ACCEL: u64 = 0x4143_434c;

/// Deterministic seed for a sub-stream, e.g. `derive_seed(seed, &[epoch, image])`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Round-robin order of single-anatomy batches within an epoch.
///
/// Iteration `i` serves anatomy `i mod A`. An epoch lasts until the anatomy
/// with the most batches has seen each of them once; smaller anatomies
/// cycle through theirs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSchedule {
    batches: Vec<usize>,
}

impl BatchSchedule {
    pub fn new(batches_per_anatomy: Vec<usize>) -> Result<Self> {
        if batches_per_anatomy.is_empty() {
            return Err(Error::Config("schedule needs at least one anatomy".into()));
        }
        if let Some(a) = batches_per_anatomy.iter().position(|&b| b == 0) {
            return Err(Error::Config(format!("anatomy #{a} has no training batches")));
        }
        Ok(BatchSchedule {
            batches: batches_per_anatomy,
        })
    }

    pub fn anatomies(&self) -> usize {
        self.batches.len()
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.batches.len() * self.batches.iter().max().copied().unwrap_or(0)
    }

    pub fn anatomy_at(&self, iteration: usize) -> usize {
        iteration % self.batches.len()
    }

    /// `(anatomy, batch index)` served at `iteration`.
    pub fn batch_at(&self, iteration: usize) -> (usize, usize) {
        let a = self.anatomy_at(iteration);
        (a, (iteration / self.batches.len()) % self.batches[a])
    }
}

/// A ground-truth image with its undersampled measurement.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub gt: ImageTensor,
    pub mask: SamplingMask,
    pub y: KSpaceTensor,
    pub x_u: ImageTensor,
}

impl Prepared {
    pub fn new(gt: &ImageTensor, mask: SamplingMask) -> Result<Self> {
        let y = undersample(gt, &mask)?;
        let x_u = zero_filled(&y)?;
        Ok(Prepared {
            gt: gt.clone(),
            mask,
            y,
            x_u,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub mae: f64,
    /// Attention-transfer loss before weighting by omega.
    pub at: f64,
}

/// Gradient flags for a batch of `anatomy`: trainable shared tensors plus
/// that anatomy's own affine pair.
pub fn batch_want(model: &CascadeModel<f32>, anatomy: Option<usize>) -> Vec<bool> {
    let base = model.base_param_indices();
    let own = anatomy.map(|a| model.anatomy_param_indices(a));
    (0..model.tensor_count())
        .map(|t| model.is_trainable(t) && (base.contains(&t) || own.is_some_and(|o| o.contains(&t))))
        .collect()
}

/// Mean loss and gradients over a single-anatomy batch. The loss is MAE on
/// the real channel plus `omega` times the attention-transfer loss against
/// `teacher` (skipped when there is no teacher or `omega` is zero).
pub fn batch_gradients(
    model: &CascadeModel<f32>,
    samples: &[Prepared],
    anatomy: Option<usize>,
    teacher: Option<&CascadeModel<f32>>,
    config: &TrainConfig,
) -> Result<(BatchLoss, Gradients<f32>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let want = batch_want(model, anatomy);
    let teacher = teacher.filter(|_| config.omega > 0.0);
    let trace = teacher.map(|_| config.trace());
    let scale = 1.0 / samples.len() as f32;
    let mut grads = Gradients::empty(model.tensor_count());
    let mut loss = BatchLoss::default();
    for s in samples {
        let tape = model.forward_tape(&s.x_u, &s.y, &s.mask, anatomy, trace)?;
        let out = tape.output();
        let n = s.gt.height() * s.gt.width();
        let mut g_out = vec![0.0f32; 2 * n];
        let mut mae = 0.0f64;
        let inv_n = scale / n as f32;
        for ((g, &p), &t) in g_out.iter_mut().zip(out.real()).zip(s.gt.real()) {
            let d = p - t;
            mae += d.abs() as f64;
            *g = if d > 0.0 {
                inv_n
            } else if d < 0.0 {
                -inv_n
            } else {
                0.0
            };
        }
        mae /= n as f64;
        let mut at = 0.0f64;
        let trace_grads = match teacher {
            Some(t) => {
                let t_tape = t.forward_tape(&s.x_u, &s.y, &s.mask, None, trace)?;
                let t_tr = t_tape.traces().expect("traced teacher");
                let s_tr = tape.traces().expect("traced student");
                let w = config.omega as f32 * scale;
                let mut tg = Vec::with_capacity(s_tr.len());
                for (ta, sa) in t_tr.iter().zip(&s_tr) {
                    let (l, mut g) = at_loss_grad(ta, sa, config.at_norm)?;
                    at += l as f64;
                    g.iter_mut().for_each(|v| *v *= w);
                    tg.push(g);
                }
                Some(tg)
            }
            None => None,
        };
        let g = model.backward(&tape, &g_out, trace_grads.as_deref(), &want)?;
        grads.accumulate(&g, 1.0);
        loss.mae += mae / samples.len() as f64;
        loss.at += at / samples.len() as f64;
    }
    loss.total = loss.mae + config.omega * loss.at;
    Ok((loss, grads))
}

/// One anatomy's contribution to a training run.
#[derive(Clone, Copy)]
struct TrainSet<'a> {
    data: &'a AnatomyData,
    /// Bank index in the trained model, if it has a bank.
    slot: Option<usize>,
    teacher: Option<&'a CascadeModel<f32>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub best_epoch: usize,
    /// Mean training loss per epoch, starting at epoch 1.
    pub epoch_losses: Vec<f64>,
    /// Validation rows for epochs `0..=epochs`.
    pub metrics: Vec<MetricRow>,
}

fn validation(model: &CascadeModel<f32>, sets: &[TrainSet<'_>], config: &TrainConfig, epoch: usize) -> Result<(f64, Vec<MetricRow>)> {
    let mut rows = Vec::new();
    for set in sets {
        for &accel in &config.accel {
            let r = evaluate(
                Reconstructor::Model(model),
                set.data,
                Split::Val,
                &EvalSpec::from_config(config, accel),
            )?;
            rows.push(MetricRow {
                epoch,
                anatomy: r.anatomy,
                split: r.split,
                accel,
                psnr_db: r.psnr_db,
                ssim_pct: r.ssim_pct,
                mae: r.mae,
            });
        }
    }
    let mae = rows.iter().map(|r| r.mae).sum::<f64>() / rows.len() as f64;
    Ok((mae, rows))
}

fn fit(model: &mut CascadeModel<f32>, sets: &[TrainSet<'_>], config: &TrainConfig) -> Result<FitReport> {
    config.validate()?;
    let bs = config.batch_size;
    let train: Vec<Vec<usize>> = sets.iter().map(|s| s.data.split.train.clone()).collect();
    let schedule = BatchSchedule::new(train.iter().map(|t| t.len().div_ceil(bs)).collect())?;
    for s in sets {
        if s.data.split.val.is_empty() {
            return Err(Error::Config(format!("`{}` has no validation images", s.data.name)));
        }
    }
    let (h, w) = sets[0].data.image_size();
    let mut adam = Adam::new(config.learning_rate, config.weight_decay);
    let mut report = FitReport::default();
    let (mut best_mae, rows) = validation(model, sets, config, 0)?;
    report.metrics.extend(rows);
    let mut best = model.clone();
    log::info!("{} epoch 0: val MAE {best_mae:.5}", config.stage);

    for epoch in 1..=config.epochs {
        let orders: Vec<Vec<usize>> = train
            .iter()
            .enumerate()
            .map(|(a, idx)| {
                let mut o = idx.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SHUFFLE, a as u64, epoch as u64]));
                o.shuffle(&mut rng);
                o
            })
            .collect();
        let mask_epoch = match config.mask_policy {
            MaskPolicy::PerEpoch => epoch as u64,
            MaskPolicy::Fixed => 0,
        };
        let mut loss_sum = 0.0;
        let iterations = schedule.iterations_per_epoch();
        for it in 0..iterations {
            let (a, b) = schedule.batch_at(it);
            let set = sets[a];
            let chunk = orders[a].chunks(bs).nth(b).expect("batch index within schedule");
            let samples = chunk
                .iter()
                .map(|&idx| {
                    let img = &set.data.images[idx];
                    if (img.height(), img.width()) != (h, w) {
                        return Err(Error::Shape(format!(
                            "image {idx} of `{}` is {}x{}, expected {h}x{w}",
                            set.data.name,
                            img.height(),
                            img.width()
                        )));
                    }
                    let key = [a as u64, mask_epoch, idx as u64];
                    let accel = config.accel
                        [(derive_seed(config.seed, &[TAG_ACCEL, key[0], key[1], key[2]]) % config.accel.len() as u64) as usize];
                    let seed = derive_seed(config.seed, &[TAG_MASK, key[0], key[1], key[2]]);
                    Prepared::new(img, config.mask_config(accel).generate(h, w, seed)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_gradients(model, &samples, set.slot, set.teacher, config)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} epoch {epoch} iteration {it} (`{}`): loss {} (MAE {}, AT {})",
                    config.stage, set.data.name, loss.total, loss.mae, loss.at
                )));
            }
            adam.step(model, &grads);
            loss_sum += loss.total;
        }
        let epoch_loss = loss_sum / iterations as f64;
        report.epoch_losses.push(epoch_loss);
        let (val_mae, rows) = validation(model, sets, config, epoch)?;
        report.metrics.extend(rows);
        log::info!(
            "{} epoch {epoch}: train loss {epoch_loss:.5}, val MAE {val_mae:.5}",
            config.stage
        );
        if val_mae < best_mae {
            best_mae = val_mae;
            best = model.clone();
            report.best_epoch = epoch;
        }
    }
    *model = best;
    Ok(report)
}

/// Trained weights plus everything needed to write the stage's artifacts.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub model: CascadeModel<f32>,
    pub meta: CheckpointMeta,
    /// Resolved configuration, echoed into the run manifest.
    pub config: TrainConfig,
    pub report: FitReport,
}

impl StageOutput {
    /// Writes the checkpoint and `run.toml` into `dir`.
    pub fn write(&self, dir: &Path, command: &str) -> Result<RunManifest> {
        save_checkpoint(&self.model, self.meta.clone(), dir)?;
        let mut manifest = RunManifest::new(command, self.config.seed, self.config.to_table()?);
        manifest.best_epoch = Some(self.report.best_epoch);
        manifest.epoch_losses = self.report.epoch_losses.clone();
        manifest.checkpoints = vec![CHECKPOINT_MANIFEST.into()];
        manifest.metrics = self.report.metrics.clone();
        manifest.save(&dir.join(RUN_MANIFEST))?;
        Ok(manifest)
    }
}

fn names(datasets: &[AnatomyData]) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::with_capacity(datasets.len());
    for d in datasets {
        if out.contains(&d.name) {
            return Err(Error::DuplicateAnatomy(d.name.clone()));
        }
        out.push(d.name.clone());
    }
    Ok(out)
}

/// Fixes `config.anatomies` to the dataset order, or checks a given list against it.
fn resolve_anatomies(config: &TrainConfig, datasets: &[AnatomyData]) -> Result<TrainConfig> {
    let given = names(datasets)?;
    if !config.anatomies.is_empty() && config.anatomies != given {
        return Err(Error::Config(format!(
            "config lists anatomies {:?} but the data provides {:?}",
            config.anatomies, given
        )));
    }
    Ok(TrainConfig {
        anatomies: given,
        ..config.clone()
    })
}

/// S1: a plain network on one anatomy.
pub fn train_independent(data: &AnatomyData, config: &TrainConfig) -> Result<StageOutput> {
    let config = TrainConfig {
        stage: Stage::S1,
        ..resolve_anatomies(config, std::slice::from_ref(data))?
    };
    config.validate()?;
    let mut model = config.init_model::<&str>(None)?;
    let sets = [TrainSet {
        data,
        slot: None,
        teacher: None,
    }];
    let report = fit(&mut model, &sets, &config)?;
    Ok(StageOutput {
        model,
        meta: CheckpointMeta {
            stage: Stage::S1,
            variant: Variant::Independent,
            distill_layer: None,
            trained_on: config.anatomies.clone(),
        },
        config,
        report,
    })
}

/// Baseline: one plain network trained on all anatomies with the S2 schedule.
pub fn train_shared(datasets: &[AnatomyData], config: &TrainConfig) -> Result<StageOutput> {
    let config = TrainConfig {
        stage: Stage::S2,
        ..resolve_anatomies(config, datasets)?
    };
    config.validate()?;
    if datasets.len() < 2 {
        return Err(Error::Config("the shared baseline needs at least two anatomies".into()));
    }
    let mut model = config.init_model::<&str>(None)?;
    let sets: Vec<TrainSet<'_>> = datasets
        .iter()
        .map(|data| TrainSet {
            data,
            slot: None,
            teacher: None,
        })
        .collect();
    let report = fit(&mut model, &sets, &config)?;
    Ok(StageOutput {
        model,
        meta: CheckpointMeta {
            stage: Stage::S2,
            variant: Variant::Shared,
            distill_layer: None,
            trained_on: config.anatomies.clone(),
        },
        config,
        report,
    })
}

fn universal_sets<'a>(
    model: &CascadeModel<f32>,
    datasets: &'a [AnatomyData],
) -> Result<Vec<TrainSet<'a>>> {
    datasets
        .iter()
        .map(|data| {
            Ok(TrainSet {
                data,
                slot: Some(model.anatomy_index(&data.name)?),
                teacher: None,
            })
        })
        .collect()
}

/// S2: universal network with one affine set per anatomy. `init`, when
/// given, continues from an existing universal model instead of a fresh one.
pub fn pretrain_universal(
    datasets: &[AnatomyData],
    config: &TrainConfig,
    init: Option<CascadeModel<f32>>,
) -> Result<StageOutput> {
    let config = TrainConfig {
        stage: Stage::S2,
        ..resolve_anatomies(config, datasets)?
    };
    config.validate()?;
    if datasets.len() < 2 {
        return Err(Error::Config("universal pre-training needs at least two anatomies".into()));
    }
    let mut model = match init {
        Some(m) if m.bank().is_none() => {
            return Err(Error::Config("initial model has no normalization bank".into()))
        }
        Some(m) => m,
        None => config.init_model(Some(&config.anatomies))?,
    };
    let sets = universal_sets(&model, datasets)?;
    let report = fit(&mut model, &sets, &config)?;
    Ok(StageOutput {
        model,
        meta: CheckpointMeta {
            stage: Stage::S2,
            variant: Variant::Universal,
            distill_layer: None,
            trained_on: config.anatomies.clone(),
        },
        config,
        report,
    })
}

/// A frozen plain network used as the distillation teacher of one anatomy.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub anatomy: String,
    pub model: CascadeModel<f32>,
}

/// S3: continues `student` with `L_MAE + omega * L_AT`, the attention term
/// taken against the batch anatomy's teacher.
pub fn distill_universal(
    student: CascadeModel<f32>,
    teachers: &[Teacher],
    datasets: &[AnatomyData],
    config: &TrainConfig,
) -> Result<StageOutput> {
    let config = TrainConfig {
        stage: Stage::S3,
        ..resolve_anatomies(config, datasets)?
    };
    config.validate()?;
    if student.bank().is_none() {
        return Err(Error::Config("the student must be a universal model".into()));
    }
    for (i, t) in teachers.iter().enumerate() {
        if t.model.bank().is_some() {
            return Err(Error::Config(format!(
                "teacher for `{}` has a normalization bank; teachers are plain networks",
                t.anatomy
            )));
        }
        if teachers[..i].iter().any(|u| u.anatomy == t.anatomy) {
            return Err(Error::Config(format!("two teachers for `{}`", t.anatomy)));
        }
        if t.model.architecture().conv_layers != student.architecture().conv_layers {
            return Err(Error::Config(format!(
                "teacher for `{}` has a different depth than the student",
                t.anatomy
            )));
        }
    }
    let mut model = student;
    let mut sets = universal_sets(&model, datasets)?;
    for set in &mut sets {
        let t = teachers
            .iter()
            .find(|t| t.anatomy == set.data.name)
            .ok_or_else(|| Error::Config(format!("no teacher for anatomy `{}`", set.data.name)))?;
        set.teacher = Some(&t.model);
    }
    let report = fit(&mut model, &sets, &config)?;
    Ok(StageOutput {
        model,
        meta: CheckpointMeta {
            stage: Stage::S3,
            variant: Variant::Distilled,
            distill_layer: Some(config.distill_layer),
            trained_on: config.anatomies.clone(),
        },
        config,
        report,
    })
}

/// S4: inserts an identity affine set for `data`'s anatomy and trains only
/// that set, on `data` only. Every pre-existing tensor is left bit-identical.
pub fn adapt_new_anatomy(
    base: CascadeModel<f32>,
    base_meta: &CheckpointMeta,
    data: &AnatomyData,
    config: &TrainConfig,
) -> Result<StageOutput> {
    let config = TrainConfig {
        stage: Stage::S4,
        ..resolve_anatomies(config, std::slice::from_ref(data))?
    };
    config.validate()?;
    if !matches!(base_meta.stage, Stage::S2 | Stage::S3 | Stage::S4) {
        return Err(Error::Config(format!(
            "adaptation starts from an S2/S3 model, got {}",
            base_meta.stage
        )));
    }
    let mut model = base;
    if model.bank().is_none() {
        return Err(Error::Config("the base model has no normalization bank".into()));
    }
    let slot = model.add_anatomy(&data.name)?;
    let own = model.anatomy_param_indices(slot);
    for t in 0..model.tensor_count() {
        model.set_trainable(t, own.contains(&t));
    }
    let sets = [TrainSet {
        data,
        slot: Some(slot),
        teacher: None,
    }];
    let report = fit(&mut model, &sets, &config)?;
    let mut trained_on = base_meta.trained_on.clone();
    trained_on.push(data.name.clone());
    Ok(StageOutput {
        model,
        meta: CheckpointMeta {
            stage: Stage::S4,
            variant: base_meta.variant,
            distill_layer: base_meta.distill_layer,
            trained_on,
        },
        config,
        report,
    })
}
