//! Time plain and modulated attention forward passes over growing sequences.
//!
//! cargo run --release --example benchmark -- [d] [rounds]

use timeformer::train::{benchmark_attention, Mechanism, BENCH_TOKENS};

fn main() -> timeformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let d = args.next().and_then(|a| a.parse().ok()).unwrap_or(64);
    let rounds = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let report = benchmark_attention(&BENCH_TOKENS, d, 0.1, rounds, 0)?;
    print!("{}", report.to_csv()?);
    println!("sa log-log slope: {:.2}", report.log_log_slope(Mechanism::Standard)?);
    println!("mosa log-log slope: {:.2}", report.log_log_slope(Mechanism::Mosa)?);
    let last = *BENCH_TOKENS.last().expect("non-empty");
    if let Some(r) = report.overhead_ratio(last) {
        println!("mosa / sa at T={last}: {r:.3}");
    }
    Ok(())
}
