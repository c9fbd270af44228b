use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::attention::NormalizerScope;
use crate::data::SyntheticKind;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Everything a command needs, assembled from defaults, a config file and flags
/// in that order of precedence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub synthetic: Option<SyntheticKind>,
    pub length: usize,
    pub channels: usize,
    pub noise: Option<f64>,
    pub preset: Option<String>,
    pub timestamp_column: Option<String>,
    pub horizons: Vec<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub denormalized: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            data: None,
            synthetic: None,
            length: 2000,
            channels: 3,
            noise: None,
            preset: None,
            timestamp_column: None,
            horizons: Vec::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("runs"),
            denormalized: false,
        }
    }
}

/// Every key accepted by [`Settings::set`], in flag spelling.
pub const KEYS: &[&str] = &[
    "data",
    "synthetic",
    "length",
    "channels",
    "noise",
    "preset",
    "timestamp-column",
    "lookback",
    "horizon",
    "horizons",
    "scales",
    "gamma",
    "variant",
    "d-model",
    "heads",
    "ffn-hidden",
    "kernel",
    "depth",
    "activation",
    "mask-padding",
    "renormalize",
    "normalizer",
    "epochs",
    "batch-size",
    "lr",
    "seed",
    "repeats",
    "patience",
    "plateau-halving",
    "max-batches",
    "out",
    "denormalized",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("invalid value '{value}' for '{key}'"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("invalid boolean '{other}' for '{key}'")),
    }
}

impl Settings {
    /// Applies one `key = value` pair. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        let m = &mut self.model;
        let t = &mut self.train;
        match k {
            "data" => self.data = Some(PathBuf::from(value.trim())),
            "synthetic" => self.synthetic = Some(value.trim().parse().map_err(|e| format!("{e}"))?),
            "length" => self.length = parse(k, value)?,
            "channels" => self.channels = parse(k, value)?,
            "noise" => self.noise = Some(parse(k, value)?),
            "preset" => self.preset = Some(value.trim().to_string()),
            "timestamp-column" => self.timestamp_column = Some(value.trim().to_string()),
            "lookback" => m.lookback = parse(k, value)?,
            "horizon" => {
                m.horizon = parse(k, value)?;
                self.horizons.clear();
            }
            "horizons" => self.horizons = parse_list(k, value)?,
            "scales" => m.num_scales = parse(k, value)?,
            "gamma" => m.gamma = parse(k, value)?,
            "variant" => m.variant = value.trim().parse().map_err(|e| format!("{e}"))?,
            "d-model" => m.d_model = parse(k, value)?,
            "heads" => m.num_heads = parse(k, value)?,
            "ffn-hidden" => m.ffn_hidden = parse(k, value)?,
            "kernel" => m.conv_kernel = parse(k, value)?,
            "depth" => m.depth = parse(k, value)?,
            "activation" => m.activation = value.trim().parse().map_err(|e| format!("{e}"))?,
            "mask-padding" => m.mask_padding = parse_bool(k, value)?,
            "renormalize" => m.renormalize_rows = parse_bool(k, value)?,
            "normalizer" => {
                m.normalizer = match value.trim() {
                    "visible" => NormalizerScope::Visible,
                    "full" => NormalizerScope::Full,
                    other => return Err(format!("invalid normalizer '{other}' (visible | full)")),
                }
            }
            "epochs" => t.epochs = parse(k, value)?,
            "batch-size" => t.batch_size = parse(k, value)?,
            "lr" => t.lr = parse(k, value)?,
            "seed" => t.seed = parse(k, value)?,
            "repeats" => t.repeats = parse(k, value)?,
            "patience" => t.early_stop_patience = Some(parse(k, value)?),
            "plateau-halving" => t.plateau_halving = Some(parse(k, value)?),
            "max-batches" => t.max_batches_per_epoch = Some(parse(k, value)?),
            "out" => self.out = PathBuf::from(value.trim()),
            "denormalized" => self.denormalized = parse_bool(k, value)?,
            _ => return Err(format!("unknown setting '{key}'")),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), n + 1))?;
            self.set(k, v).map_err(|e| format!("{}:{}: {e}", path.display(), n + 1))?;
        }
        Ok(())
    }

    /// Horizons to run: the explicit list, else the model horizon.
    pub fn horizon_list(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.model.horizon]
        } else {
            self.horizons.clone()
        }
    }
}
