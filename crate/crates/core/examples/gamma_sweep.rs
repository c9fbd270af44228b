//! Test error as a function of the decay rate.
//!
//! cargo run --release --example gamma_sweep -- [epochs]

use timeformer::data::{synthetic, SyntheticKind};
use timeformer::model::ModelConfig;
use timeformer::train::{sweep_gamma, ExperimentSpec, TrainConfig, GAMMA_GRID};

fn main() -> timeformer::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let mut data = synthetic(SyntheticKind::SineMix, 1500, 2, 0)?;
    data.normalize()?;
    let model = ModelConfig {
        lookback: 48,
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
    let report = sweep_gamma(&data, &ExperimentSpec::new("sine_mix", model, train), &GAMMA_GRID)?;
    print!("{}", report.to_text());
    Ok(())
}
