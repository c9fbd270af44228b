use std::f64::consts::{PI, SQRT_2};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SeriesDataset;
use crate::error::{config_err, Error, Result};
use crate::rng::{derive_seed, seeded};

pub const AR1_PHI: f64 = 0.9;
/// Period of the seasonal component of `trend_season_noise`, in steps.
pub const DAILY_PERIOD: f64 = 24.0;
/// Sum of the `sine_mix` amplitudes; a noiseless series never exceeds it.
pub const SINE_MIX_AMPLITUDE_SUM: f64 = 1.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Ar1,
    SineMix,
    TrendSeasonNoise,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [Self::Ar1, Self::SineMix, Self::TrendSeasonNoise];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ar1 => "ar1",
            Self::SineMix => "sine_mix",
            Self::TrendSeasonNoise => "trend_season_noise",
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            Self::Ar1 => 1.0,
            Self::SineMix => 0.1,
            Self::TrendSeasonNoise => 0.3,
        }
    }
}

impl std::fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| config_err!("unknown synthetic kind '{}'", s))
    }
}

/// Generates `length` rows of `n` independent channels with the kind's default noise.
pub fn synthetic(kind: SyntheticKind, length: usize, n: usize, seed: u64) -> Result<SeriesDataset> {
    synthetic_with_noise(kind, length, n, seed, kind.default_noise())
}

/// As [`synthetic`] with an explicit noise standard deviation.
///
/// `ar1` starts every channel at `x_0 = 1`, so zero noise gives `x_t = 0.9^t`.
pub fn synthetic_with_noise(kind: SyntheticKind, length: usize, n: usize, seed: u64, noise: f64) -> Result<SeriesDataset> {
    if length == 0 || n == 0 {
        return Err(config_err!("synthetic series needs length >= 1 and N >= 1"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(config_err!("noise scale must be finite and non-negative, got {}", noise));
    }
    let mut values = vec![0.0; length * n];
    for c in 0..n {
        let mut rng = seeded(derive_seed(seed, c as u64));
        let mut eps = || -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            noise * z
        };
        let channel: Vec<f64> = match kind {
            SyntheticKind::Ar1 => {
                let mut x = 1.0;
                (0..length)
                    .map(|t| {
                        if t > 0 {
                            x = AR1_PHI * x + eps();
                        }
                        x
                    })
                    .collect()
            }
            SyntheticKind::SineMix => {
                let mut prng = seeded(derive_seed(seed ^ 0x5151, c as u64));
                let periods = [DAILY_PERIOD, 10.0 * SQRT_2, 7.0 * PI];
                let amps = [1.0, 0.5, 0.25];
                debug_assert_eq!(amps.iter().sum::<f64>(), SINE_MIX_AMPLITUDE_SUM);
                let phases: Vec<f64> = (0..3).map(|_| prng.random_range(0.0..2.0 * PI)).collect();
                (0..length)
                    .map(|t| {
                        let t = t as f64;
                        let s: f64 = (0..3).map(|k| amps[k] * (2.0 * PI * t / periods[k] + phases[k]).sin()).sum();
                        s + eps()
                    })
                    .collect()
            }
            SyntheticKind::TrendSeasonNoise => {
                let mut prng = seeded(derive_seed(seed ^ 0x7e5, c as u64));
                let slope = prng.random_range(1.0..3.0) / length as f64;
                let amp = prng.random_range(0.5..1.5);
                let phase = prng.random_range(0.0..2.0 * PI);
                (0..length)
                    .map(|t| {
                        let t = t as f64;
                        slope * t + amp * (2.0 * PI * t / DAILY_PERIOD + phase).sin() + eps()
                    })
                    .collect()
            }
        };
        for (t, v) in channel.into_iter().enumerate() {
            values[t * n + c] = v;
        }
    }
    let columns = (0..n).map(|c| format!("{kind}_{c}")).collect();
    SeriesDataset::new(values, columns)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar1_closed_form() {
        let d = synthetic_with_noise(SyntheticKind::Ar1, 50, 2, 3, 0.0).unwrap();
        for t in 0..50 {
            for c in 0..2 {
                assert!((d.value(t, c) - 0.9f64.powi(t as i32)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sine_mix_bounded_without_noise() {
        let d = synthetic_with_noise(SyntheticKind::SineMix, 2000, 3, 9, 0.0).unwrap();
        assert!(d.values().iter().all(|v| v.abs() <= SINE_MIX_AMPLITUDE_SUM));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        for kind in SyntheticKind::ALL {
            let a = synthetic(kind, 300, 3, 1).unwrap();
            assert_eq!(a, synthetic(kind, 300, 3, 1).unwrap());
            assert_ne!(a, synthetic(kind, 300, 3, 2).unwrap());
        }
    }

    #[test]
    fn parse_kind() {
        assert_eq!("trend-season-noise".parse::<SyntheticKind>().unwrap(), SyntheticKind::TrendSeasonNoise);
        assert!("walk".parse::<SyntheticKind>().is_err());
    }
}
