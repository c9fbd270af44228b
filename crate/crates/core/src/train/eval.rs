use serde::{Deserialize, Serialize};

use super::metrics::last_value_forecast;
use crate::data::{SeriesDataset, Split};
use crate::error::{dim_err, Error, Result};
use crate::model::TimeFormer;
use crate::tensor::Tensor;

/// Windows per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// MSE and MAE of `model` over every stride-1 window of `split`, in normalized space.
pub fn evaluate(model: &TimeFormer, data: &SeriesDataset, split: Split) -> Result<Metrics> {
    let c = model.config();
    evaluate_with(data, split, c.lookback, c.horizon, false, |x| model.predict(x))
}

/// As [`evaluate`] with both sides mapped back to the raw scale first.
pub fn evaluate_denormalized(model: &TimeFormer, data: &SeriesDataset, split: Split) -> Result<Metrics> {
    let c = model.config();
    evaluate_with(data, split, c.lookback, c.horizon, true, |x| model.predict(x))
}

/// Metrics of the last-value-repeat forecast.
pub fn last_value_baseline(
    data: &SeriesDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
    denormalized: bool,
) -> Result<Metrics> {
    evaluate_with(data, split, lookback, horizon, denormalized, |x| last_value_forecast(x, horizon))
}

/// Scores any univariate forecaster mapping `[B, L_h]` to `[B, L_f]`.
pub fn evaluate_with(
    data: &SeriesDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
    denormalized: bool,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Metrics> {
    let starts = data.window_starts(data.range(split), lookback, horizon);
    if starts.is_empty() {
        return Err(Error::Report(format!(
            "{split:?} split yields zero windows for lookback {lookback} + horizon {horizon}"
        )));
    }
    let n = data.channels();
    let stats = denormalized.then(|| data.norm_stats()).flatten();
    let (mut sq, mut abs, mut count) = (0.0, 0.0, 0usize);
    for chunk in starts.chunks(EVAL_CHUNK) {
        let (x, y) = data.channel_batch(chunk, lookback, horizon)?;
        let pred = predict(&x)?;
        if pred.shape() != y.shape() {
            return Err(dim_err!("forecast {:?} does not match target {:?}", pred.shape(), y.shape()));
        }
        for (r, (p_row, y_row)) in pred.data().chunks(horizon).zip(y.data().chunks(horizon)).enumerate() {
            for (&p, &t) in p_row.iter().zip(y_row) {
                let (p, t) = match stats {
                    Some(s) => (s.denormalize(p, r % n), s.denormalize(t, r % n)),
                    None => (p, t),
                };
                sq += (p - t) * (p - t);
                abs += (p - t).abs();
            }
            count += horizon;
        }
    }
    let metrics = Metrics {
        mse: sq / count as f64,
        mae: abs / count as f64,
        windows: starts.len(),
    };
    if !metrics.mse.is_finite() {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok(metrics)
}
