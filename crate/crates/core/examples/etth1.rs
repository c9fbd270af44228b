//! Desk-scale ETTh1 run with the standard 12/4/4-month split.
//!
//! cargo run --release --example etth1 -- path/to/ETTh1.csv [epochs] [horizon]

use timeformer::data::{load_csv, Split, SplitSizes};
use timeformer::model::{ModelConfig, TimeFormer};
use timeformer::train::{evaluate, evaluate_denormalized, last_value_baseline, train, TrainConfig};

fn main() -> timeformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(path) = args.next() else {
        eprintln!("usage: etth1 <ETTh1.csv> [epochs] [horizon]");
        std::process::exit(2);
    };
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let horizon = args.next().and_then(|a| a.parse().ok()).unwrap_or(96);

    let mut data = load_csv(path.as_ref(), None)?.with_splits(SplitSizes::preset("etth1")?)?;
    data.normalize()?;
    println!("{} rows, channels {:?}", data.len(), data.columns());

    let config = ModelConfig {
        lookback: 96,
        horizon,
        d_model: 16,
        num_heads: 2,
        ffn_hidden: 32,
        ..ModelConfig::default()
    };
    let mut model = TimeFormer::new(config, 0)?;
    let history = train(
        &mut model,
        &data,
        &TrainConfig {
            epochs,
            early_stop_patience: Some(5),
            ..TrainConfig::default()
        },
    )?;
    println!("best epoch {} of {}", history.best_epoch, history.train_loss.len());
    let test = evaluate(&model, &data, Split::Test)?;
    let raw = evaluate_denormalized(&model, &data, Split::Test)?;
    let base = last_value_baseline(&data, Split::Test, 96, horizon, false)?;
    println!("normalized test mse {:.4} mae {:.4} (last value {:.4})", test.mse, test.mae, base.mse);
    println!("raw-scale test mse {:.4} mae {:.4}", raw.mse, raw.mae);
    Ok(())
}
