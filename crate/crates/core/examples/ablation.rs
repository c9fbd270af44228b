//! Full model against its no-segmentation and standard-attention variants on a
//! synthetic series.
//!
//! cargo run --release --example ablation -- [epochs] [repeats]

use timeformer::data::{synthetic, SyntheticKind};
use timeformer::model::ModelConfig;
use timeformer::train::{run_ablation, ExperimentSpec, TrainConfig};

fn main() -> timeformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let repeats = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);

    let mut data = synthetic(SyntheticKind::TrendSeasonNoise, 2000, 3, 0)?;
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
        repeats,
        ..TrainConfig::default()
    };
    let report = run_ablation(&data, &ExperimentSpec::new("trend_season_noise", model, train))?;
    print!("{}", report.to_text());
    Ok(())
}
