//! Print the decay term, the visible-key softmax and the modulated causal
//! weights for a short random sequence.
//!
//! cargo run --release --example mosa_attention -- [gamma] [tokens]

use rand::Rng as _;
use timeformer::attention::{apply_modulation_and_mask, hawkes_modulation, raw_attention};
use timeformer::rng::seeded;
use timeformer::tensor::{Mask, Tape, Tensor};

fn show(name: &str, t: &Tensor) {
    let n = t.shape()[t.rank() - 1];
    println!("{name}:");
    for row in t.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:6.3}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() -> timeformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let gamma: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.5);
    let tokens: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);
    let d = 4;

    let mut rng = seeded(3);
    let mut rand = |n: usize| Tensor::new(&[tokens, n], (0..tokens * n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (q, k) = (rand(d)?, rand(d)?);

    let omega = hawkes_modulation(tokens, gamma)?;
    let mut tape = Tape::inference();
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    let a = raw_attention(&mut tape, qv, kv, Some(&Mask::causal(tokens)))?;
    let m = apply_modulation_and_mask(&mut tape, a, &omega, true)?;

    show("decay exp(-gamma |i-j|)", &omega);
    show("softmax over visible keys", &tape.value(a));
    show("modulated and masked", &tape.value(m));
    let masses: Vec<String> = tape.data(m).chunks(tokens).map(|r| format!("{:.3}", r.iter().sum::<f64>())).collect();
    println!("row masses: {}", masses.join(" "));
    Ok(())
}
