//! Train briefly, then write the inter-patch attention map of the first test
//! window as CSV and PGM.
//!
//! cargo run --release --example export_attention -- [out_dir]

use std::path::PathBuf;

use timeformer::cli::export::{matrix_csv, matrix_pgm};
use timeformer::data::{synthetic, Split, SyntheticKind};
use timeformer::model::{ModelConfig, Stage, TimeFormer};
use timeformer::train::{train, TrainConfig};

fn main() -> timeformer::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/example_attention".into()));
    std::fs::create_dir_all(&out).map_err(|e| timeformer::Error::io(&out, e))?;

    let mut data = synthetic(SyntheticKind::TrendSeasonNoise, 1200, 1, 0)?;
    data.normalize()?;
    let config = ModelConfig {
        lookback: 96,
        horizon: 24,
        d_model: 16,
        num_heads: 2,
        ffn_hidden: 32,
        ..ModelConfig::default()
    };
    let mut model = TimeFormer::new(config, 0)?;
    train(&mut model, &data, &TrainConfig { epochs: 2, ..TrainConfig::default() })?;

    let start = data.range(Split::Test).start;
    let history: Vec<f64> = (start..start + 96).map(|t| data.value(t, 0)).collect();
    for (stage, name) in [(Stage::Inter, "inter"), (Stage::Intra, "intra")] {
        let maps = model.attention_maps(&history, stage, 1, 0)?;
        let m = &maps[maps.len() - 1][0];
        let base = out.join(format!("attention_{name}_head0"));
        let (csv, pgm) = (base.with_extension("csv"), base.with_extension("pgm"));
        std::fs::write(&csv, matrix_csv(m)).map_err(|e| timeformer::Error::io(&csv, e))?;
        std::fs::write(&pgm, matrix_pgm(m)).map_err(|e| timeformer::Error::io(&pgm, e))?;
        println!("{name}: {0}x{0} map, causal {1}, written to {2}", m.size, m.upper_triangle_is_zero(), pgm.display());
    }
    Ok(())
}
