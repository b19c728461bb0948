//! Training loop: BCE + Adam + cosine annealing with early stopping and
//! best-checkpoint tracking.
//!
//! Per batch: one Adam step at the cosine-annealed learning rate. Per epoch:
//! a full validation pass in eval mode with no augmentation, metric
//! computation in both aggregations, and an update of the three best-model
//! slots (min validation loss, max Dice, max Jaccard). Training stops when
//! the validation loss has not improved for `patience` consecutive epochs or
//! `epochs_max` is reached; the best-by-validation-loss snapshot is then
//! reloaded for final reporting.

pub mod adam;
pub mod checkpoint;
pub mod schedule;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use schedule::{cosine_lr, EarlyStopping};

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use crate::augment::{AugmentSpec, Sample};
use crate::data::{resize_sample, samples_to_batch, BatchLoader, DatasetManifest};
use crate::elem::Element;
use crate::error::{Error, Result};
use crate::metrics::{
    accumulate, reports, ConfusionCounts, MetricsReport,
};
use crate::nn::TensorRole;
use crate::tensor::Tensor;
use crate::unet::UNet;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub patience: usize,
    pub seed: u64,
    pub augment: AugmentSpec,
    /// Where the three best checkpoints go; in-memory only when `None`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Evaluate the train split (eval mode, no augmentation) every N epochs
    /// and on the final epoch; 0 disables. Evaluation never perturbs
    /// training state, so the cadence does not change the trajectory.
    pub eval_train_every: usize,
}

impl TrainConfig {
    pub fn new(epochs_max: usize, batch_size: usize, lr_max: f64, seed: u64) -> Self {
        Self {
            epochs_max,
            batch_size,
            lr_max,
            lr_min: lr_max / 100.0,
            patience: 2,
            seed,
            augment: AugmentSpec::none(),
            checkpoint_dir: None,
            eval_train_every: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if self.epochs_max == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs_max and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of the training table.
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation metrics: per-image mean IoU plus micro Dice / Jaccard.
    pub miou: f64,
    pub dice: f64,
    pub jaccard: f64,
    /// Train-split Dice (eval mode), when `eval_train` is set.
    pub train_dice: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BestSlot {
    pub epoch: usize,
    pub value: f64,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    /// Index of the last epoch that ran (0-based).
    pub stopped_epoch: usize,
    pub stopped_early: bool,
    pub best_val_loss: BestSlot,
    pub best_dice: BestSlot,
    pub best_jaccard: BestSlot,
    /// Validation metrics of the reloaded best-by-val-loss model.
    pub final_val_loss: f64,
    pub final_micro: MetricsReport,
    pub final_per_image: MetricsReport,
}

impl TrainReport {
    /// Human-readable per-epoch table: Train Loss, Val Loss, mIoU, Dice,
    /// Jaccard, time per epoch.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "epoch | train loss | val loss | miou  | dice  | jaccard | time/epoch (s)\n",
        );
        out.push_str(
            "------+------------+----------+-------+-------+---------+---------------\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:5} | {:10.4} | {:8.4} | {:5.3} | {:5.3} | {:7.3} | {:14.1}\n",
                r.epoch, r.train_loss, r.val_loss, r.miou, r.dice, r.jaccard, r.seconds
            ));
        }
        out
    }
}

/// Evaluation of one split: mean BCE loss at model resolution plus both
/// metric aggregations computed against native-resolution ground truth
/// (predictions are nearest-resized back before counting).
pub struct EvalOutcome {
    pub loss: f64,
    pub micro: MetricsReport,
    pub per_image: MetricsReport,
    pub per_image_counts: Vec<ConfusionCounts>,
}

pub fn evaluate<E: Element>(
    model: &mut UNet<E>,
    native_samples: &[Sample],
    batch_size: usize,
) -> Result<EvalOutcome> {
    if native_samples.is_empty() {
        return Err(Error::EmptyList);
    }
    let was_training = model.is_training();
    model.set_training(false);
    let outcome = evaluate_inner(model, native_samples, batch_size);
    model.set_training(was_training);
    outcome
}

fn evaluate_inner<E: Element>(
    model: &mut UNet<E>,
    native_samples: &[Sample],
    batch_size: usize,
) -> Result<EvalOutcome> {
    let target = model.config.input_size;
    let threshold = model.config.threshold;
    let mut loss_sum = 0.0;
    let mut elems = 0usize;
    let mut per_image_counts = Vec::with_capacity(native_samples.len());

    for chunk in native_samples.chunks(batch_size.max(1)) {
        let resized: Vec<Sample> = chunk.iter().map(|s| resize_sample(s, target)).collect();
        let batch = samples_to_batch::<E>(&resized)?;
        let mut tape = crate::autograd::Tape::new();
        let x = tape.constant(batch.images.clone());
        let logits = model.forward(&mut tape, x)?;
        let loss = tape.bce_with_logits_mean(logits, &batch.masks)?;
        let loss_val = tape.value(loss).scalar_value()?.to_f64();
        let n = batch.masks.numel();
        loss_sum += loss_val * n as f64;
        elems += n;

        // Threshold per image, resize the prediction back to native
        // resolution, and count against the native mask.
        let logits_t = tape.value(logits);
        let (bn, _, h, w) = logits_t.dims4()?;
        for (bi, native) in (0..bn).zip(chunk.iter()) {
            let mut pred = crate::augment::MaskBuf::new(w, h);
            let base = bi * h * w;
            for i in 0..h * w {
                let z = logits_t.data()[base + i].to_f64();
                let p = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                pred.data[i] = u8::from(p >= threshold);
            }
            let pred_native =
                crate::data::resize_mask_nearest(&pred, native.mask.width, native.mask.height);
            let mut counts = ConfusionCounts::default();
            accumulate(&mut counts, &pred_native, &native.mask)?;
            per_image_counts.push(counts);
        }
    }

    let (micro, per_image) = reports(&per_image_counts)?;
    Ok(EvalOutcome {
        loss: loss_sum / elems as f64,
        micro,
        per_image,
        per_image_counts,
    })
}

/// Train `model` on the manifest's train split, validating on `valid`.
pub fn fit<E: Element>(
    model: &mut UNet<E>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let target = model.config.input_size;
    let loader = BatchLoader::new(
        manifest,
        "train",
        target,
        cfg.batch_size,
        cfg.augment.clone(),
        cfg.seed,
    )?;
    let valid_loader = BatchLoader::new(
        manifest,
        "valid",
        target,
        cfg.batch_size,
        AugmentSpec::none(),
        cfg.seed,
    )?;
    let valid_native: Vec<Sample> = valid_loader.native_samples().to_vec();
    let train_native: Vec<Sample> = loader.native_samples().to_vec();

    let total_steps = cfg.epochs_max * loader.batches_per_epoch();
    let mut adam = Adam::<E>::new(AdamConfig::default());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut global_step = 0usize;

    let mut rows: Vec<EpochRow> = Vec::new();
    let mut best_val: Option<(f64, usize, Checkpoint)> = None;
    let mut best_dice: Option<(f64, usize)> = None;
    let mut best_jaccard: Option<(f64, usize)> = None;
    let mut stopped_early = false;

    let ckpt_path = |name: &str| cfg.checkpoint_dir.as_ref().map(|d| d.join(name));

    for epoch in 0..cfg.epochs_max {
        let t0 = Instant::now();
        model.set_training(true);
        let mut loss_sum = 0.0;
        let mut elems = 0usize;

        for (bi, batch) in loader.epoch_batches::<E>(epoch)?.into_iter().enumerate() {
            let lr = cosine_lr(global_step, total_steps, cfg.lr_max, cfg.lr_min)?;
            let mut tape = crate::autograd::Tape::new();
            let x = tape.constant(batch.images.clone());
            let logits = model.forward(&mut tape, x)?;
            let loss = tape.bce_with_logits_mean(logits, &batch.masks)?;
            let loss_val = tape.value(loss).scalar_value()?.to_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    value: loss_val,
                });
            }
            let grads = tape.backward(loss)?;
            let mut grad_table: HashMap<String, Tensor<E>> = HashMap::new();
            for (name, var) in tape.params() {
                if let Some(g) = grads.get(*var) {
                    grad_table.insert(name.clone(), g.clone());
                }
            }
            adam.start_step(lr);
            model.visit_tensors(&mut |name, role, t| {
                if role == TensorRole::Param {
                    if let Some(g) = grad_table.get(name) {
                        adam.update(name, t, g);
                    }
                }
            });
            loss_sum += loss_val * batch.masks.numel() as f64;
            elems += batch.masks.numel();
            global_step += 1;
        }

        let val = evaluate(model, &valid_native, cfg.batch_size)?;
        let eval_train_now = cfg.eval_train_every > 0
            && (epoch % cfg.eval_train_every == 0 || epoch + 1 == cfg.epochs_max);
        let train_dice = if eval_train_now {
            Some(evaluate(model, &train_native, cfg.batch_size)?.micro.dice)
        } else {
            None
        };

        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / elems.max(1) as f64,
            val_loss: val.loss,
            miou: val.micro.miou,
            dice: val.micro.dice,
            jaccard: val.micro.jaccard,
            train_dice,
            seconds: t0.elapsed().as_secs_f64(),
        });

        let meta = CheckpointMeta {
            epoch: epoch as u32,
            val_loss: val.loss,
            dice: val.micro.dice,
            jaccard: val.micro.jaccard,
            rng_seed: cfg.seed,
        };

        if best_val.as_ref().map_or(true, |(b, _, _)| val.loss < *b) {
            let snapshot = Checkpoint::from_model(model, meta);
            if let Some(path) = ckpt_path("best-val-loss.ckpt") {
                snapshot.save(&path)?;
            }
            best_val = Some((val.loss, epoch, snapshot));
        }
        if best_dice.as_ref().map_or(true, |(b, _)| val.micro.dice > *b) {
            if let Some(path) = ckpt_path("best-dice.ckpt") {
                Checkpoint::from_model(model, meta).save(&path)?;
            }
            best_dice = Some((val.micro.dice, epoch));
        }
        if best_jaccard
            .as_ref()
            .map_or(true, |(b, _)| val.micro.jaccard > *b)
        {
            if let Some(path) = ckpt_path("best-jaccard.ckpt") {
                Checkpoint::from_model(model, meta).save(&path)?;
            }
            best_jaccard = Some((val.micro.jaccard, epoch));
        }

        let (_, stop) = stopper.observe(val.loss);
        if stop {
            stopped_early = true;
            break;
        }
    }

    // Reload the best-by-val-loss snapshot for final reporting.
    let (best_loss, best_epoch, snapshot) = best_val.expect("at least one epoch ran");
    snapshot.restore_into(model)?;
    let final_val = evaluate(model, &valid_native, cfg.batch_size)?;

    let (dice_v, dice_e) = best_dice.expect("at least one epoch ran");
    let (jac_v, jac_e) = best_jaccard.expect("at least one epoch ran");
    Ok(TrainReport {
        stopped_epoch: rows.last().map(|r| r.epoch).unwrap_or(0),
        stopped_early,
        rows,
        best_val_loss: BestSlot {
            epoch: best_epoch,
            value: best_loss,
            path: ckpt_path("best-val-loss.ckpt"),
        },
        best_dice: BestSlot {
            epoch: dice_e,
            value: dice_v,
            path: ckpt_path("best-dice.ckpt"),
        },
        best_jaccard: BestSlot {
            epoch: jac_e,
            value: jac_v,
            path: ckpt_path("best-jaccard.ckpt"),
        },
        final_val_loss: final_val.loss,
        final_micro: final_val.micro,
        final_per_image: final_val.per_image,
    })
}
