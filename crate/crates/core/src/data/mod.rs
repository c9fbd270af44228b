//! Multivariate series, chronological splits, z-scoring and sliding windows.

mod csv_io;
mod synthetic;

pub use csv_io::load_csv;
pub use synthetic::{synthetic, synthetic_with_noise, SyntheticKind, AR1_PHI, DAILY_PERIOD, SINE_MIX_AMPLITUDE_SUM};

use std::ops::Range;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Channels whose train std falls below this are only shifted.
pub const MIN_STD: f64 = 1e-8;

/// Row counts of the train, validation and test ranges, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// `train = ⌊0.7·len⌋`-style split: train and test by truncation, val takes the rest.
    pub fn from_ratios(len: usize, train: f64, val: f64, test: f64) -> Result<Self> {
        if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) || train + val + test > 1.0 + 1e-12 {
            return Err(config_err!("invalid split ratios {}/{}/{}", train, val, test));
        }
        let n_train = (len as f64 * train + 1e-9) as usize;
        let n_test = (len as f64 * test + 1e-9) as usize;
        let n_val = if (train + val + test - 1.0).abs() < 1e-12 {
            len - n_train - n_test
        } else {
            (len as f64 * val + 1e-9) as usize
        };
        Ok(Self::new(n_train, n_val, n_test))
    }

    /// Row counts used for the public benchmark datasets.
    pub fn preset(name: &str) -> Result<Self> {
        let sizes = match name.to_ascii_lowercase().as_str() {
            "etth1" | "etth2" => (8545, 2881, 2881),
            "ettm1" | "ettm2" => (34465, 11521, 11521),
            "exchange" => (5120, 665, 1422),
            "weather" => (36792, 5271, 10540),
            "electricity" | "ecl" => (18317, 2633, 5261),
            other => return Err(config_err!("unknown split preset '{}'", other)),
        };
        Ok(Self::new(sizes.0, sizes.1, sizes.2))
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(config_err!("unknown split '{}'", other)),
        }
    }
}

/// Per-channel z-score statistics taken from the train range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of rows `range` of a row-major `[len, channels]` matrix.
    /// Degenerate channels get `std = 1`, which makes normalization a pure shift.
    pub fn fit(values: &[f64], channels: usize, range: Range<usize>) -> Result<(Self, Vec<usize>)> {
        if range.is_empty() {
            return Err(config_err!("cannot fit normalization on an empty train split"));
        }
        let n = range.len() as f64;
        let mut mean = vec![0.0; channels];
        for r in range.clone() {
            for (m, v) in mean.iter_mut().zip(&values[r * channels..(r + 1) * channels]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; channels];
        for r in range {
            for ((s, v), m) in var.iter_mut().zip(&values[r * channels..(r + 1) * channels]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut degenerate = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let sd = (s / n).sqrt();
                if sd < MIN_STD {
                    degenerate.push(c);
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok((Self { mean, std }, degenerate))
    }

    pub fn normalize(&self, value: f64, channel: usize) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// Row-major `[len, channels]` series with its split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    values: Vec<f64>,
    len: usize,
    columns: Vec<String>,
    splits: SplitSizes,
    norm: Option<NormStats>,
}

/// One input/target pair; the target starts right after the input.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `[L_h, N]`
    pub input: Tensor,
    /// `[L_f, N]`
    pub target: Tensor,
    pub start_index: usize,
}

impl SeriesDataset {
    /// Wraps `values` (row-major, `columns.len()` per row) with a 0.7/0.1/0.2 split.
    pub fn new(values: Vec<f64>, columns: Vec<String>) -> Result<Self> {
        let n = columns.len();
        if n == 0 || values.len() % n != 0 {
            return Err(dim_err!(
                "{} values do not form rows of {} columns",
                values.len(),
                n
            ));
        }
        let len = values.len() / n;
        Ok(Self {
            values,
            len,
            columns,
            splits: SplitSizes::from_ratios(len, 0.7, 0.1, 0.2)?,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels() + channel]
    }

    pub fn splits(&self) -> SplitSizes {
        self.splits
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }

    pub fn set_splits(&mut self, splits: SplitSizes) -> Result<()> {
        if splits.total() > self.len {
            return Err(config_err!(
                "split sizes {:?} exceed series length {}",
                splits,
                self.len
            ));
        }
        if self.norm.is_some() {
            return Err(config_err!("splits must be set before normalization"));
        }
        self.splits = splits;
        Ok(())
    }

    pub fn with_splits(mut self, splits: SplitSizes) -> Result<Self> {
        self.set_splits(splits)?;
        Ok(self)
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        self.splits.range(split)
    }

    /// Z-scores every row with statistics of the train range only.
    ///
    /// Returns one warning per channel that was only shifted because its train
    /// std is below [`MIN_STD`].
    pub fn normalize(&mut self) -> Result<Vec<String>> {
        if self.norm.is_some() {
            return Err(config_err!("dataset is already normalized"));
        }
        let n = self.channels();
        let (stats, degenerate) = NormStats::fit(&self.values, n, self.range(Split::Train))?;
        let warnings: Vec<String> = degenerate
            .iter()
            .map(|&c| {
                let msg = format!(
                    "channel '{}' is constant on the train split; shifted only",
                    self.columns[c]
                );
                warn!("{msg}");
                msg
            })
            .collect();
        for row in self.values.chunks_mut(n) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = stats.normalize(*v, c);
            }
        }
        self.norm = Some(stats);
        Ok(warnings)
    }

    /// Undoes [`SeriesDataset::normalize`] on a copy of the values.
    pub fn denormalized_values(&self) -> Vec<f64> {
        match &self.norm {
            None => self.values.clone(),
            Some(stats) => self
                .values
                .chunks(self.channels())
                .flat_map(|row| row.iter().enumerate().map(|(c, &v)| stats.denormalize(v, c)))
                .collect(),
        }
    }

    /// Stride-1 window starts inside `range`, oldest first.
    pub fn window_starts(&self, range: Range<usize>, lookback: usize, horizon: usize) -> Vec<usize> {
        let need = lookback + horizon;
        if range.len() < need || range.end > self.len {
            warn!(
                "range {:?} is too short for lookback {} + horizon {}; no windows",
                range, lookback, horizon
            );
            return Vec::new();
        }
        (range.start..=range.end - need).collect()
    }

    /// Window starts of `split` in a seed-determined shuffled order.
    pub fn shuffled_starts(&self, split: Split, lookback: usize, horizon: usize, seed: u64) -> Vec<usize> {
        let mut starts = self.window_starts(self.range(split), lookback, horizon);
        starts.shuffle(&mut seeded(seed));
        starts
    }

    pub fn window(&self, start: usize, lookback: usize, horizon: usize) -> Result<WindowSample> {
        if start + lookback + horizon > self.len {
            return Err(dim_err!(
                "window at {} with {}+{} steps overruns length {}",
                start,
                lookback,
                horizon,
                self.len
            ));
        }
        let n = self.channels();
        let slice = |from: usize, len: usize| {
            Tensor::new(&[len, n], self.values[from * n..(from + len) * n].to_vec())
        };
        Ok(WindowSample {
            input: slice(start, lookback)?,
            target: slice(start + lookback, horizon)?,
            start_index: start,
        })
    }

    /// Sliding windows over `range`; empty when the range is too short.
    pub fn windows(
        &self,
        range: Range<usize>,
        lookback: usize,
        horizon: usize,
    ) -> impl Iterator<Item = WindowSample> + Clone + '_ {
        self.window_starts(range, lookback, horizon)
            .into_iter()
            .map(move |s| self.window(s, lookback, horizon).expect("start is in range"))
    }

    /// Per-channel univariate rows for a batch of window starts.
    ///
    /// Returns inputs `[B·N, L_h]` and targets `[B·N, L_f]`, window-major then channel.
    pub fn channel_batch(&self, starts: &[usize], lookback: usize, horizon: usize) -> Result<(Tensor, Tensor)> {
        let n = self.channels();
        let mut inputs = Vec::with_capacity(starts.len() * n * lookback);
        let mut targets = Vec::with_capacity(starts.len() * n * horizon);
        for &s in starts {
            if s + lookback + horizon > self.len {
                return Err(dim_err!("window at {} overruns the series", s));
            }
            for c in 0..n {
                inputs.extend((s..s + lookback).map(|r| self.value(r, c)));
                targets.extend((s + lookback..s + lookback + horizon).map(|r| self.value(r, c)));
            }
        }
        Ok((
            Tensor::new(&[starts.len() * n, lookback], inputs)?,
            Tensor::new(&[starts.len() * n, horizon], targets)?,
        ))
    }

    /// Writes the dataset, including normalization state, as a `MOSADATA` container.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let header = CacheHeader {
            format: "timeformer-dataset".into(),
            columns: self.columns.clone(),
            len: self.len,
            splits: self.splits,
            normalization: self.norm.clone(),
        };
        container::write(path, CACHE_MAGIC, &header, &self.values)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let (h, values): (CacheHeader, Vec<f64>) = container::read(path, CACHE_MAGIC)?;
        if values.len() != h.len * h.columns.len() {
            return Err(Error::Checkpoint("dataset cache payload size mismatch".into()));
        }
        Ok(Self {
            values,
            len: h.len,
            columns: h.columns,
            splits: h.splits,
            norm: h.normalization,
        })
    }
}

pub const CACHE_MAGIC: &[u8; 8] = b"MOSADATA";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheHeader {
    format: String,
    columns: Vec<String>,
    len: usize,
    splits: SplitSizes,
    normalization: Option<NormStats>,
}
