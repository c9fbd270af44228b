use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

fn check(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(dim_err!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        ));
    }
    if pred.numel() == 0 {
        return Err(dim_err!("metrics over an empty tensor"));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth)?;
    let sum: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.numel() as f64)
}

/// Mean absolute error over every element.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check(pred, truth)?;
    let sum: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.numel() as f64)
}

/// Repeats the last row of each `[B, L_h]` history `horizon` times.
pub fn last_value_forecast(history: &Tensor, horizon: usize) -> Result<Tensor> {
    let s = history.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(dim_err!("last-value forecast expects [B, L_h >= 1], got {:?}", s));
    }
    let data = history
        .data()
        .chunks(s[1])
        .flat_map(|row| std::iter::repeat_n(row[s[1] - 1], horizon))
        .collect();
    Tensor::new(&[s[0], horizon], data)
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
