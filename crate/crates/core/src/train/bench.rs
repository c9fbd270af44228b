use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{aggregate, apply_modulation_and_mask, hawkes_modulation, raw_attention};
use crate::error::{config_err, Error, Result};
use crate::rng::seeded;
use crate::tensor::{Mask, Tape, Tensor};

pub const BENCH_TOKENS: [usize; 4] = [16, 64, 256, 1024];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// `softmax(QKᵀ/√d)·V`
    Standard,
    /// Causal softmax, Hawkes weights, then `·V`.
    Mosa,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Standard => "sa",
            Mechanism::Mosa => "mosa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub tokens: usize,
    pub mechanism: Mechanism,
    /// Best observed seconds per forward pass.
    pub seconds: f64,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub d: usize,
    pub gamma: f64,
    pub rows: Vec<BenchRow>,
}

/// One attention forward pass over `[T, d]` projections, built on an inference tape.
pub fn attention_forward(mechanism: Mechanism, q: &Tensor, k: &Tensor, v: &Tensor, gamma: f64) -> Result<Tensor> {
    let t = q.shape()[0];
    let mut tape = Tape::inference();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = match mechanism {
        Mechanism::Standard => {
            let a = raw_attention(&mut tape, q, k, None)?;
            aggregate(&mut tape, a, v)?
        }
        Mechanism::Mosa => {
            let omega = hawkes_modulation(t, gamma)?;
            let a = raw_attention(&mut tape, q, k, Some(&Mask::causal(t)))?;
            let a = apply_modulation_and_mask(&mut tape, a, &omega, true)?;
            aggregate(&mut tape, a, v)?
        }
    };
    Ok(tape.value(out))
}

/// Times both mechanisms at every `T`. Passes are repeated until each
/// measurement round covers roughly `2^22` multiply-adds, and the best of
/// `rounds` is kept. The two mechanisms alternate within each round.
pub fn benchmark_attention(tokens: &[usize], d: usize, gamma: f64, rounds: usize, seed: u64) -> Result<BenchReport> {
    if tokens.is_empty() || d == 0 || rounds == 0 {
        return Err(config_err!("benchmark needs token counts, d >= 1 and rounds >= 1"));
    }
    let mut rng = seeded(seed);
    let mut rows = Vec::new();
    for &t in tokens {
        if t == 0 {
            return Err(config_err!("token count must be >= 1"));
        }
        let mut rand_t = || Tensor::new(&[t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (q, k, v) = (rand_t()?, rand_t()?, rand_t()?);
        let passes = ((1usize << 22) / (t * t * d)).max(1);
        let mut best = [f64::INFINITY; 2];
        for mech in [Mechanism::Standard, Mechanism::Mosa] {
            attention_forward(mech, &q, &k, &v, gamma)?;
        }
        for _ in 0..rounds {
            for (slot, mech) in [Mechanism::Standard, Mechanism::Mosa].into_iter().enumerate() {
                let clock = Instant::now();
                for _ in 0..passes {
                    std::hint::black_box(attention_forward(mech, &q, &k, &v, gamma)?);
                }
                best[slot] = best[slot].min(clock.elapsed().as_secs_f64() / passes as f64);
            }
        }
        for (slot, mech) in [Mechanism::Standard, Mechanism::Mosa].into_iter().enumerate() {
            rows.push(BenchRow {
                tokens: t,
                mechanism: mech,
                seconds: best[slot],
                passes,
            });
        }
    }
    Ok(BenchReport { d, gamma, rows })
}

impl BenchReport {
    pub fn seconds(&self, tokens: usize, mechanism: Mechanism) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.tokens == tokens && r.mechanism == mechanism)
            .map(|r| r.seconds)
    }

    /// Least-squares slope of `ln(seconds)` against `ln(T)`.
    pub fn log_log_slope(&self, mechanism: Mechanism) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.mechanism == mechanism)
            .map(|r| ((r.tokens as f64).ln(), r.seconds.ln()))
            .collect();
        if pts.len() < 2 {
            return Err(Error::Report("slope needs at least two token counts".into()));
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        Ok(sxy / sxx)
    }

    /// MoSA time over SA time at `tokens`.
    pub fn overhead_ratio(&self, tokens: usize) -> Option<f64> {
        Some(self.seconds(tokens, Mechanism::Mosa)? / self.seconds(tokens, Mechanism::Standard)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(["tokens", "mechanism", "d", "seconds_per_pass", "passes"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.tokens.to_string(),
                r.mechanism.as_str().to_string(),
                self.d.to_string(),
                format!("{:.9}", r.seconds),
                r.passes.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mechanisms_agree_without_decay_or_mask_on_first_row() {
        let q = Tensor::new(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let sa = attention_forward(Mechanism::Standard, &q, &q, &q, 0.0).unwrap();
        let mosa = attention_forward(Mechanism::Mosa, &q, &q, &q, 0.0).unwrap();
        // The last row sees every key in both mechanisms.
        assert!((sa.data()[4] - mosa.data()[4]).abs() < 1e-15);
        assert_eq!(&mosa.data()[..2], &q.data()[..2]);
    }

    #[test]
    fn slope_of_exact_quadratic() {
        let rows = [16usize, 64, 256]
            .iter()
            .map(|&t| BenchRow {
                tokens: t,
                mechanism: Mechanism::Standard,
                seconds: 1e-9 * (t * t) as f64,
                passes: 1,
            })
            .collect();
        let r = BenchReport { d: 4, gamma: 0.1, rows };
        assert!((r.log_log_slope(Mechanism::Standard).unwrap() - 2.0).abs() < 1e-12);
    }
}
