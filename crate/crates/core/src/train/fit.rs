use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use crate::data::{SeriesDataset, Split};
use crate::error::{config_err, Error, Result};
use crate::model::TimeFormer;
use crate::rng::derive_seed;
use crate::tensor::{Adam, Tape, Var};

/// Loss above this counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per step; each contributes one row per channel.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
    pub repeats: usize,
    /// Halve the learning rate after this many epochs without validation improvement.
    pub plateau_halving: Option<usize>,
    /// Cap on optimizer steps per epoch.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.005,
            seed: 0,
            early_stop_patience: None,
            repeats: 5,
            plateau_halving: None,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.repeats == 0 {
            return Err(config_err!("epochs, batch_size and repeats must all be >= 1"));
        }
        if self.early_stop_patience == Some(0) || self.plateau_halving == Some(0) || self.max_batches_per_epoch == Some(0) {
            return Err(config_err!("patience and batch caps must be >= 1 when set"));
        }
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    /// `None` when the validation split has no windows.
    pub val_mse: Vec<Option<f64>>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub steps: usize,
}

/// Mean squared error between two equally shaped vars, as a scalar var.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Trains on the train split with Adam and MSE, keeping the best-validation weights.
///
/// Window order depends only on `config.seed` and the epoch, so models trained
/// with the same config see the same batches.
pub fn train(model: &mut TimeFormer, data: &SeriesDataset, config: &TrainConfig) -> Result<History> {
    config.validate()?;
    let (lh, lf) = (model.config().lookback, model.config().horizon);
    let mut adam = Adam::new(config.lr);
    let mut history = History {
        train_loss: Vec::with_capacity(config.epochs),
        val_mse: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        steps: 0,
    };
    let has_val = !data.window_starts(data.range(Split::Val), lh, lf).is_empty();
    let mut best: Option<(f64, crate::tensor::ParamStore)> = None;
    let mut stale = 0;
    let mut since_halving = 0;

    for epoch in 1..=config.epochs {
        let starts = data.shuffled_starts(Split::Train, lh, lf, derive_seed(config.seed, epoch as u64));
        if starts.is_empty() {
            return Err(config_err!(
                "train split of {} rows yields no windows for lookback {} + horizon {}",
                data.splits().train,
                lh,
                lf
            ));
        }
        let limit = config.max_batches_per_epoch.unwrap_or(usize::MAX);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in starts.chunks(config.batch_size).take(limit) {
            history.steps += 1;
            let loss = step(model, data, chunk, &mut adam).map_err(|e| match e {
                Error::NonFinite(m) | Error::Training { message: m, .. } => Error::Training {
                    epoch,
                    step: history.steps,
                    message: m,
                },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        history.train_loss.push(train_loss);

        let val = if has_val {
            Some(evaluate(model, data, Split::Val)?.mse)
        } else {
            None
        };
        history.val_mse.push(val);
        debug!("epoch {epoch}: train {train_loss:.6} val {val:?}");

        let score = val.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.params().clone()));
            history.best_epoch = epoch;
            stale = 0;
            since_halving = 0;
        } else {
            stale += 1;
            since_halving += 1;
        }
        if let Some(p) = config.plateau_halving {
            if since_halving >= p {
                adam.lr *= 0.5;
                since_halving = 0;
                debug!("halving learning rate to {}", adam.lr);
            }
        }
        if config.early_stop_patience.is_some_and(|p| stale >= p) {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    if let Some((_, store)) = best {
        model.params_mut().copy_values_from(&store)?;
    }
    Ok(history)
}

fn step(model: &mut TimeFormer, data: &SeriesDataset, starts: &[usize], adam: &mut Adam) -> Result<f64> {
    let (lh, lf) = (model.config().lookback, model.config().horizon);
    let (x, y) = data.channel_batch(starts, lh, lf)?;
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let y = tape.constant(y);
    let pred = model.forward(&mut tape, x, true)?;
    let loss_var = mse_loss(&mut tape, pred, y)?;
    let loss = tape.data(loss_var)[0];
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Training {
            epoch: 0,
            step: 0,
            message: format!("loss {loss}"),
        });
    }
    tape.backward(loss_var)?;
    let store = model.params_mut();
    tape.accumulate_param_grads(store)?;
    tape.commit_stat_updates(store)?;
    adam.step(store)?;
    store.check_finite()?;
    Ok(loss)
}
