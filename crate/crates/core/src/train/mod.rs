//! Minibatch training with Adadelta and global-norm clipping.

pub mod checkpoint;
pub mod optim;

use std::time::Instant;

use crate::data::{make_batches, Batch, EncodedPair};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngState;
use crate::scalar::Scalar;

pub use checkpoint::{read_precision, write_atomic, Checkpoint};
pub use optim::{clip_gradients, Adadelta, DEFAULT_EPSILON, DEFAULT_RHO};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub bucket: usize,
    pub clip: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Hard cap on parameter updates across all epochs.
    pub max_updates: Option<usize>,
    /// Dev evaluation period in updates; `None` evaluates once per epoch.
    pub dev_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 80,
            bucket: 1600,
            clip: 1.0,
            rho: DEFAULT_RHO,
            epsilon: DEFAULT_EPSILON,
            epochs: 1,
            max_updates: None,
            dev_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.bucket == 0 || !self.bucket.is_multiple_of(self.batch) {
            return Err(Error::invalid(format!(
                "bucket {} must be a positive multiple of batch {}",
                self.bucket, self.batch
            )));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::invalid(format!("clip threshold must be positive, got {}", self.clip)));
        }
        if self.dev_every == Some(0) {
            return Err(Error::invalid("dev interval must be >= 1 update"));
        }
        Ok(())
    }
}

/// Summed negative log-likelihood over a set of sentence pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSummary {
    pub sentences: usize,
    pub tokens: usize,
    pub total: f64,
}

impl NllSummary {
    pub fn per_sentence(&self) -> f64 {
        self.total / self.sentences as f64
    }

    pub fn per_token(&self) -> f64 {
        self.total / self.tokens as f64
    }
}

/// Teacher-forced NLL of `data` under `model`, in corpus order.
pub fn evaluate_nll<T: Scalar>(model: &Model<T>, data: &[EncodedPair], batch: usize) -> Result<NllSummary> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate NLL on an empty set"));
    }
    let mut summary = NllSummary {
        sentences: 0,
        tokens: 0,
        total: 0.0,
    };
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&EncodedPair> = chunk.iter().collect();
        let b = Batch::from_pairs(&refs)?;
        let nlls = model.sentence_nlls(&b)?;
        summary.total += nlls.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        summary.sentences += b.size;
        summary.tokens += b.target_tokens();
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub update: usize,
    pub epoch: usize,
    pub elapsed_secs: f64,
    /// Mean NLL per sentence of the minibatch.
    pub train_nll: f64,
    pub tokens: usize,
    pub sentences: usize,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub dev_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updates: usize,
    pub elapsed_secs: f64,
    /// Mean minibatch NLL per sentence seen during the epoch.
    pub train_nll: f64,
    pub train_nll_per_token: f64,
    pub dev_nll: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub updates: Vec<UpdateRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Losses only, without wall-clock fields.
    pub fn loss_trace(&self) -> Vec<(usize, usize, f64, f64)> {
        self.updates
            .iter()
            .map(|u| (u.update, u.epoch, u.train_nll, u.grad_norm))
            .collect()
    }

    pub fn dev_history(&self) -> Vec<f64> {
        self.updates
            .iter()
            .filter_map(|u| u.dev_nll)
            .chain(self.epochs.iter().filter_map(|e| e.dev_nll))
            .collect()
    }
}

/// Hooks for logging and periodic checkpoints. Errors abort training.
pub trait TrainObserver<T: Scalar> {
    fn on_update(&mut self, _record: &UpdateRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _record: &EpochRecord, _model: &Model<T>, _optimizer: &Adadelta<T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> TrainObserver<T> for () {}

#[derive(Debug, Clone)]
pub struct BestDev<T> {
    pub model: Model<T>,
    pub dev_nll: f64,
    pub update: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub optimizer: Adadelta<T>,
    /// Lowest-dev-NLL parameters seen; `None` without a dev set.
    pub best: Option<BestDev<T>>,
    pub log: TrainLog,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Best-dev model when available, otherwise the final one.
    pub fn selected(&self) -> &Model<T> {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }
}

pub fn train<T: Scalar>(
    mut model: Model<T>,
    optimizer: Option<Adadelta<T>>,
    train: &[EncodedPair],
    dev: &[EncodedPair],
    cfg: &TrainConfig,
    rng: &mut RngState,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let mut optimizer = match optimizer {
        Some(opt) => opt,
        None => Adadelta::new(&model.params, cfg.rho, cfg.epsilon)?,
    };
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut best: Option<BestDev<T>> = None;
    let mut update = 0usize;
    let budget = cfg.max_updates.unwrap_or(usize::MAX);

    let consider_dev = |model: &Model<T>, update: usize, best: &mut Option<BestDev<T>>| -> Result<Option<f64>> {
        if dev.is_empty() {
            return Ok(None);
        }
        let nll = evaluate_nll(model, dev, cfg.batch)?.per_sentence();
        if best.as_ref().is_none_or(|b| nll < b.dev_nll) {
            *best = Some(BestDev {
                model: model.clone(),
                dev_nll: nll,
                update,
            });
        }
        Ok(Some(nll))
    };

    'epochs: for epoch in 1..=cfg.epochs {
        if update >= budget {
            break;
        }
        let batches = make_batches(train, cfg.batch, cfg.bucket, rng)?;
        let (mut epoch_total, mut epoch_tokens, mut epoch_sentences) = (0.0, 0usize, 0usize);
        for b in &batches {
            if update >= budget {
                break 'epochs;
            }
            let (loss, mut grads) = model.loss_and_gradients(b)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { update: update + 1 });
            }
            let grad_norm = clip_gradients(&mut grads, cfg.clip)?;
            optimizer.step(&mut model.params, &grads)?;
            update += 1;
            epoch_total += loss * b.size as f64;
            epoch_tokens += b.target_tokens();
            epoch_sentences += b.size;

            let dev_nll = match cfg.dev_every {
                Some(k) if update.is_multiple_of(k) => consider_dev(&model, update, &mut best)?,
                _ => None,
            };
            let record = UpdateRecord {
                update,
                epoch,
                elapsed_secs: start.elapsed().as_secs_f64(),
                train_nll: loss,
                tokens: b.target_tokens(),
                sentences: b.size,
                grad_norm,
                dev_nll,
            };
            observer.on_update(&record)?;
            log.updates.push(record);
        }
        let dev_nll = match cfg.dev_every {
            None => consider_dev(&model, update, &mut best)?,
            Some(_) => None,
        };
        let record = EpochRecord {
            epoch,
            updates: update,
            elapsed_secs: start.elapsed().as_secs_f64(),
            train_nll: epoch_total / epoch_sentences.max(1) as f64,
            train_nll_per_token: epoch_total / epoch_tokens.max(1) as f64,
            dev_nll,
        };
        observer.on_epoch_end(&record, &model, &optimizer)?;
        log.epochs.push(record);
    }

    Ok(TrainOutcome {
        model,
        optimizer,
        best,
        log,
    })
}
