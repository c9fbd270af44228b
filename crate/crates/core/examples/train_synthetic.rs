//! Train the full model on a synthetic trend + seasonality series and compare
//! it with the last-value baseline.
//!
//! cargo run --release --example train_synthetic -- [epochs] [seed]

use std::time::Instant;

use timeformer::data::{synthetic, Split, SyntheticKind};
use timeformer::model::{ModelConfig, TimeFormer};
use timeformer::train::{evaluate, last_value_baseline, train, TrainConfig};

fn main() -> timeformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let mut data = synthetic(SyntheticKind::TrendSeasonNoise, 2000, 3, seed)?;
    data.normalize()?;

    let config = ModelConfig {
        lookback: 96,
        horizon: 24,
        d_model: 16,
        num_heads: 2,
        ffn_hidden: 32,
        ..ModelConfig::default()
    };
    let mut model = TimeFormer::new(config, seed)?;
    println!("parameters: {}", model.num_params());

    let train_cfg = TrainConfig {
        epochs,
        seed,
        early_stop_patience: Some(5),
        ..TrainConfig::default()
    };
    let clock = Instant::now();
    let history = train(&mut model, &data, &train_cfg)?;
    for (e, (l, v)) in history.train_loss.iter().zip(&history.val_mse).enumerate() {
        println!("epoch {:>3}  train {:.4}  val {:.4}", e + 1, l, v.unwrap_or(f64::NAN));
    }
    println!("trained in {:.1}s, best epoch {}", clock.elapsed().as_secs_f64(), history.best_epoch);

    let test = evaluate(&model, &data, Split::Test)?;
    let base = last_value_baseline(&data, Split::Test, 96, 24, false)?;
    println!("test mse {:.4} (last value {:.4}), mae {:.4} (last value {:.4})", test.mse, base.mse, test.mae, base.mae);
    println!("improvement over baseline: {:.1}%", 100.0 * (1.0 - test.mse / base.mse));
    Ok(())
}
