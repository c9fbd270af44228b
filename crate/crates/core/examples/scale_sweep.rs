//! Test error against the number of pooled scales.
//!
//! cargo run --release --example scale_sweep -- [epochs]

use timeformer::data::{synthetic, SyntheticKind};
use timeformer::model::ModelConfig;
use timeformer::train::{sweep_scales, ExperimentSpec, TrainConfig};

fn main() -> timeformer::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let mut data = synthetic(SyntheticKind::TrendSeasonNoise, 1500, 2, 0)?;
    data.normalize()?;
    let model = ModelConfig {
        lookback: 96,
        horizon: 24,
        d_model: 16,
        num_heads: 2,
        ffn_hidden: 32,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs,
        repeats: 1,
        ..TrainConfig::default()
    };
    let report = sweep_scales(&data, &ExperimentSpec::new("trend_season_noise", model, train), &[1, 2, 3, 4])?;
    print!("{}", report.to_text());
    Ok(())
}
