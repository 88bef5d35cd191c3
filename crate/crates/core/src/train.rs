//! Mini-batch training with best-validation model selection.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Adam, AdamConfig, GroupRates};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{EncodedSample, Model, ModelConfig, Prediction};
use crate::nn::{Mode, ModelRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// GRU, its embeddings, FiLM projection, conv stem, blocks, visual head.
    pub film_lr: f64,
    /// Encoder embedding tables and layers.
    pub encoder_lr: f64,
    /// Co-attention `W` and the fusion head.
    pub coattention_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    /// Seeds parameter init, shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            film_lr: 3e-4,
            encoder_lr: 1e-6,
            coattention_lr: 1e-4,
            batch_size: 32,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            epochs: 15,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn rates(&self) -> GroupRates {
        GroupRates {
            film: self.film_lr,
            encoder: self.encoder_lr,
            coattention: self.coattention_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, lr) in [
            ("film_lr", self.film_lr),
            ("encoder_lr", self.encoder_lr),
            ("coattention_lr", self.coattention_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub train_loss: f64,
    pub val: MetricsReport,
    pub wall_seconds: f64,
    /// Global gradient norm of every batch, measured before clipping.
    pub grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochLog>,
    /// 1-based index of the epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    pub test: Option<MetricsReport>,
}

/// Callbacks the training loop uses for timing and progress.
pub trait TrainHooks {
    /// Monotonic seconds; the default clock always reads zero.
    fn now(&mut self) -> f64 {
        0.0
    }

    fn epoch_end(&mut self, _log: &EpochLog) {}
}

/// No timing, no output.
pub struct Silent;

impl TrainHooks for Silent {}

/// Seed for the dropout stream of one batch; reported when its loss is not finite.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut z = seed ^ ((epoch as u64) << 32) ^ (batch as u64);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Eval-mode predictions and metrics over `samples`.
pub fn evaluate(model: &Model, samples: &[EncodedSample]) -> Result<(MetricsReport, Vec<Prediction>)> {
    let predictions = samples.iter().map(|s| model.predict(s)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let predicted: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    Ok((compute_metrics(&predicted, &labels)?, predictions))
}

/// Trains a fresh model and returns it with the best-validation-F1 parameters
/// restored (ties go to the earliest epoch).
pub fn train(
    config: &TrainConfig,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    test_set: Option<&[EncodedSample]>,
    hooks: &mut dyn TrainHooks,
) -> Result<(Model, RunRecord)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(AdamConfig::new(config.rates(), config.weight_decay), model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed);
    shuffler.set_stream(1);

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, MetricsReport, Vec<crate::Tensor>)> = None;
    for epoch in 1..=config.epochs {
        let start = hooks.now();
        order.shuffle(&mut shuffler);
        let mut loss_sum = 0.0;
        let mut grad_norms = Vec::with_capacity(order.len().div_ceil(config.batch_size));
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let seed = batch_seed(config.seed, epoch, b);
            let mut rng = ModelRng::seed_from_u64(seed);
            let scale = 1.0 / batch.len() as f64;
            model.params_mut().zero_grad();
            for &i in batch {
                let mut mode = Mode::Train {
                    rng: &mut rng,
                    dropout: config.model.dropout,
                };
                let loss = model.accumulate_gradients(&train_set[i], &mut mode, scale)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        batch_seed: seed,
                    });
                }
                loss_sum += loss;
            }
            grad_norms.push(model.params_mut().clip_grad_norm(config.clip_norm));
            adam.step(model.params_mut())?;
        }
        let (val, _) = evaluate(&model, val_set)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val,
            wall_seconds: hooks.now() - start,
            grad_norms,
        };
        hooks.epoch_end(&log);
        if best.as_ref().is_none_or(|(_, m, _)| val.f1 > m.f1) {
            best = Some((epoch, val, model.params().snapshot()));
        }
        epochs.push(log);
    }

    let (best_epoch, best_val, snapshot) = best.expect("at least one epoch");
    model.params_mut().restore(&snapshot);
    let test = match test_set {
        Some(set) => Some(evaluate(&model, set)?.0),
        None => None,
    };
    Ok((
        model,
        RunRecord {
            epochs,
            best_epoch,
            best_val,
            test,
        },
    ))
}
