//! Loss, optimizer, metrics and the training and ablation drivers.

pub mod adam;
pub mod loss;
pub mod metrics;

pub use adam::{Adam, AdamConfig};
pub use loss::{soft_dice_loss, DiceLossConfig};
pub use metrics::{binarize, evaluate, Confusion, MetricReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::blocks::{Ctx, NormKind};
use crate::data::{self, VolumeSample};
use crate::error::{Error, Result};
use crate::model::{AtrousResUNet, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub dice: DiceLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 2,
            lr: 1e-5,
            seed: 0,
            dice: DiceLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, norm: NormKind) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if norm == NormKind::Batch && self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                "batch normalization needs batch_size >= 2 in training mode",
            ));
        }
        self.adam().validate()?;
        self.dice.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub dice: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    /// This epoch produced the best checkpoint so far.
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_checkpoint: Vec<u8>,
    /// `None` when no epoch improved on the initial model.
    pub best_epoch: Option<usize>,
    /// Why training stopped early, if it did.
    pub halted: Option<String>,
}

/// Mean per-volume dice loss and pooled metrics of `model` in inference
/// mode, one volume at a time.
pub fn validate(model: &AtrousResUNet, samples: &[VolumeSample], dice: &DiceLossConfig) -> Result<(f64, MetricReport)> {
    if samples.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut loss = 0.0;
    let mut counts = Confusion::default();
    for s in samples {
        let (x, gt) = data::batch(&[s], model.config().precision)?;
        let prob = model.infer(&x)?;
        let mut tape = Tape::new();
        let p = tape.constant(prob.clone());
        let l = soft_dice_loss(&mut tape, p, &gt, dice)?;
        loss += tape.value(l).item()?;
        counts = counts.merge(Confusion::count(&binarize(&prob)?, &gt)?);
    }
    Ok((loss / samples.len() as f64, MetricReport::from_counts(counts)?))
}

/// Stateful training over one model; [`train_loop`] drives it for a fixed
/// number of epochs.
pub struct Trainer<'m> {
    model: &'m mut AtrousResUNet,
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
    best_score: f64,
    best_checkpoint: Vec<u8>,
    best_epoch: Option<usize>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut AtrousResUNet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(model.config().norm_kind)?;
        let adam = Adam::new(cfg.adam(), model.store())?;
        let best_checkpoint = model.save_checkpoint();
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            adam,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: Vec::new(),
            best_score: f64::INFINITY,
            best_checkpoint,
            best_epoch: None,
        })
    }

    pub fn model(&self) -> &AtrousResUNet {
        self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[&VolumeSample]) -> Result<f64> {
        let (x, gt) = data::batch(batch, self.model.config().precision)?;
        let mut tape = Tape::new();
        let (loss, updates) = {
            let xv = tape.constant(x);
            let mut ctx = Ctx::new(&mut tape, self.model.store(), true);
            let pred = self.model.forward(&mut ctx, xv)?;
            let updates = ctx.take_stat_updates();
            (soft_dice_loss(ctx.tape, pred, &gt, &self.cfg.dice)?, updates)
        };
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        drop(tape);
        let store = self.model.store_mut();
        store.zero_grad();
        grads.accumulate(store)?;
        self.adam.step(store)?;
        for (id, t) in updates {
            store.set_value(id, t)?;
        }
        Ok(value)
    }

    /// Shuffles, steps through every batch, validates and updates the best
    /// checkpoint. A final batch of one is skipped under batch norm.
    pub fn run_epoch(&mut self, train: &[VolumeSample], val: &[VolumeSample]) -> Result<&EpochRecord> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let bn = self.model.config().norm_kind == NormKind::Batch;
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            if bn && chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&VolumeSample> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch)?;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::invalid("no trainable batch in this epoch"));
        }
        let train_loss = total / batches as f64;
        let epoch = self.history.len() + 1;
        let (val_loss, report) = if val.is_empty() {
            (None, None)
        } else {
            let (l, r) = validate(self.model, val, &self.cfg.dice)?;
            (Some(l), Some(r))
        };
        let score = val_loss.unwrap_or(train_loss);
        let best = score < self.best_score;
        if best {
            self.best_score = score;
            self.best_checkpoint = self.model.save_checkpoint();
            self.best_epoch = Some(epoch);
        }
        let metric = |f: fn(&MetricReport) -> Option<f64>| report.as_ref().and_then(f);
        self.history.push(EpochRecord {
            epoch,
            steps: self.adam.steps(),
            train_loss,
            val_loss,
            dice: metric(|r| Some(r.dice)),
            accuracy: metric(|r| Some(r.accuracy)),
            precision: metric(|r| r.precision),
            recall: metric(|r| r.recall),
            specificity: metric(|r| r.specificity),
            best,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Restores the best checkpoint into the model and returns the record.
    pub fn finish(self, halted: Option<String>) -> Result<TrainOutcome> {
        let restored = AtrousResUNet::load_checkpoint(&self.best_checkpoint, self.model.config())?;
        *self.model = restored;
        Ok(TrainOutcome {
            history: self.history,
            best_checkpoint: self.best_checkpoint,
            best_epoch: self.best_epoch,
            halted,
        })
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Numeric(_))
}

/// Trains for `cfg.epochs` epochs, selecting the checkpoint with the lowest
/// validation loss (training loss when `val` is empty). On divergence the
/// run stops and the best checkpoint so far is kept. The model is left
/// holding the selected parameters.
pub fn train_loop(
    model: &mut AtrousResUNet,
    train: &[VolumeSample],
    val: &[VolumeSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if model.config().norm_kind == NormKind::Batch && train.len() < 2 {
        return Err(Error::invalid("batch normalization needs at least two training samples"));
    }
    let mut trainer = Trainer::new(model, cfg)?;
    let mut halted = None;
    for _ in 0..cfg.epochs {
        match trainer.run_epoch(train, val) {
            Ok(_) => {}
            Err(e) if is_divergence(&e) => {
                halted = Some(format!("diverged in epoch {}: {e}", trainer.history().len() + 1));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    trainer.finish(halted)
}

/// One arm of an ablation.
#[derive(Debug, Clone)]
pub struct AblationArm {
    pub config: ModelConfig,
    pub outcome: TrainOutcome,
    /// Metrics of the selected checkpoint on the held-out set, or on the
    /// training set when nothing is held out.
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub layer: AblationArm,
    pub batch: AblationArm,
    /// Fields on which the two arms' model configurations differ.
    pub config_diff: Vec<&'static str>,
}

/// Trains the same configuration twice, with layer and with batch
/// normalization, on identical data, seeds and batch order.
pub fn ablation_run(
    config: &ModelConfig,
    train: &[VolumeSample],
    val: &[VolumeSample],
    cfg: &TrainConfig,
) -> Result<AblationReport> {
    let arm = |kind: NormKind| -> Result<AblationArm> {
        let config = ModelConfig {
            norm_kind: kind,
            ..config.clone()
        };
        cfg.validate(kind)?;
        let mut model = AtrousResUNet::build(&config)?;
        let outcome = train_loop(&mut model, train, val, cfg)?;
        let eval_set = if val.is_empty() { train } else { val };
        let (_, report) = validate(&model, eval_set, &cfg.dice)?;
        Ok(AblationArm {
            config,
            outcome,
            report,
        })
    };
    let layer = arm(NormKind::Layer)?;
    let batch = arm(NormKind::Batch)?;
    let config_diff = layer.config.diff(&batch.config);
    Ok(AblationReport {
        layer,
        batch,
        config_diff,
    })
}
