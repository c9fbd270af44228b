//! Generate each synthetic series, print summary statistics and save a cache.
//!
//! cargo run --release --example synthetic_data -- [length] [channels]

use timeformer::data::{synthetic, SeriesDataset, Split, SyntheticKind};

fn main() -> timeformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let len = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let n = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let dir = std::env::temp_dir();
    for kind in SyntheticKind::ALL {
        let mut d = synthetic(kind, len, n, 0)?;
        d.normalize()?;
        let stats = d.norm_stats().expect("normalized");
        println!(
            "{:<20} train mean {:?} std {:?}, test windows (96+24): {}",
            kind.as_str(),
            stats.mean.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            stats.std.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            d.window_starts(d.range(Split::Test), 96, 24).len()
        );
        let path = dir.join(format!("{kind}.mosadata"));
        d.save_cache(&path)?;
        assert_eq!(SeriesDataset::load_cache(&path)?, d);
    }
    Ok(())
}
