use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::ctr::{CtrModel, Workspace};
use crate::data::InteractionRecord;
use crate::error::{Error, Result};
use crate::eval::{auc, logloss};

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// result does not depend on the thread count.
const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Upper bound on epochs; early stopping usually ends sooner.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    /// Epochs without validation-AUC improvement tolerated before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            lr: 1e-3,
            l2: 0.0,
            patience: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::InvalidInput("lr must be > 0 and l2 >= 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            l2: self.l2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation split holds a single class.
    pub val_auc: Option<f64>,
    pub val_logloss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, snapped to f32 precision.
    pub model: CtrModel,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub epoch_seconds: Vec<f64>,
}

/// Mean BCE gradient over `batch` (indices into `records`), written to
/// `grad`. Returns the mean loss.
pub fn batch_gradient(
    model: &CtrModel,
    records: &[InteractionRecord],
    batch: &[usize],
    grad: &mut Vec<f64>,
) -> Result<f64> {
    let n_params = model.n_params();
    let partials: Vec<Result<(Vec<f64>, f64)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; n_params];
            let mut ws = Workspace::default();
            let mut loss = 0.0;
            for &i in chunk {
                loss += model.accumulate_gradient(&records[i], &mut ws, &mut g)?.1;
            }
            Ok((g, loss))
        })
        .collect();
    grad.clear();
    grad.resize(n_params, 0.0);
    let mut total_loss = 0.0;
    for partial in partials {
        let (g, loss) = partial?;
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
        total_loss += loss;
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(total_loss * scale)
}

pub(crate) fn predict_parallel(model: &CtrModel, records: &[InteractionRecord]) -> Result<Vec<f64>> {
    let parts: Vec<Result<Vec<f64>>> = records.par_chunks(1024).map(|c| model.predict(c)).collect();
    let mut out = Vec::with_capacity(records.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn param_norm(params: &[f64]) -> f64 {
    params.iter().map(|p| p * p).sum::<f64>().sqrt()
}

/// Mini-batch Adam training with a seeded shuffle and early stopping on
/// validation AUC (validation logloss when AUC is undefined).
pub fn train_epochs(
    mut model: CtrModel,
    train: &[InteractionRecord],
    val: &[InteractionRecord],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("training and validation splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimizerState::new(model.n_params(), config.adam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = Vec::new();
    let mut history = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0usize;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let loss = batch_gradient(&model, train, batch, &mut grad)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    param_norm: param_norm(model.params()),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(model.params_mut(), &grad, &mut state);
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());
        let labels: Vec<u8> = val.iter().map(|r| r.label).collect();
        let probs = predict_parallel(&model, val)?;
        let val_auc = auc(&labels, &probs).ok();
        let val_logloss = logloss(&labels, &probs)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auc,
            val_logloss,
        };
        debug!("epoch {epoch}: {metrics:?}");
        history.push(metrics);
        let score = val_auc.unwrap_or(-val_logloss);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.params().to_vec()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params_mut().copy_from_slice(&params);
    model.snap_to_storage_precision();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        epoch_seconds,
    })
}
