use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::mean;
use crate::error::{Error, Result};

/// One configuration at one horizon, over all repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub horizon: usize,
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
    pub mse_mean: f64,
    pub mae_mean: f64,
    /// Last-value-repeat forecast on the same windows.
    pub baseline_mse: f64,
    pub baseline_mae: f64,
    pub raw_mse_mean: Option<f64>,
    pub raw_mae_mean: Option<f64>,
    pub best_epochs: Vec<usize>,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, horizon: usize, mse: Vec<f64>, mae: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            horizon,
            mse_mean: mean(&mse),
            mae_mean: mean(&mae),
            mse,
            mae,
            baseline_mse: f64::NAN,
            baseline_mae: f64::NAN,
            raw_mse_mean: None,
            raw_mae_mean: None,
            best_epochs: Vec::new(),
        }
    }
}

/// Results of one experiment. Everything except the timings is a pure function
/// of config, seeds and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub experiment: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub annotations: Vec<String>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

/// Where [`ForecastReport::write`] put its files.
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub text: PathBuf,
    pub json: PathBuf,
    pub timing: PathBuf,
}

/// First 16 hex digits of the SHA-256 of the compact JSON encoding.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Report(e.to_string()))?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

impl ForecastReport {
    pub fn new(experiment: impl Into<String>, config: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Report(e.to_string()))?;
        Ok(Self {
            experiment: experiment.into(),
            config_hash: config_hash(&config)?,
            config,
            seeds,
            rows: Vec::new(),
            annotations: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn row(&self, label: &str, horizon: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label && r.horizon == horizon)
    }

    /// Checks each stored mean against a recomputation from its repeats.
    pub fn check_means(&self) -> Result<()> {
        for r in &self.rows {
            if (mean(&r.mse) - r.mse_mean).abs() > 1e-12 || (mean(&r.mae) - r.mae_mean).abs() > 1e-12 {
                return Err(Error::Report(format!("row {} h={} has inconsistent means", r.label, r.horizon)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Report(e.to_string());
        w.write_record([
            "experiment",
            "label",
            "horizon",
            "mse_mean",
            "mae_mean",
            "mse_repeats",
            "mae_repeats",
            "baseline_mse",
            "baseline_mae",
            "raw_mse_mean",
            "raw_mae_mean",
            "config_hash",
            "seeds",
        ])
        .map_err(err)?;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        for r in &self.rows {
            w.write_record([
                self.experiment.clone(),
                r.label.clone(),
                r.horizon.to_string(),
                r.mse_mean.to_string(),
                r.mae_mean.to_string(),
                join(&r.mse),
                join(&r.mae),
                r.baseline_mse.to_string(),
                r.baseline_mae.to_string(),
                opt(r.raw_mse_mean),
                opt(r.raw_mae_mean),
                self.config_hash.clone(),
                seeds.clone(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment:  {}", self.experiment);
        let _ = writeln!(s, "config hash: {}", self.config_hash);
        let _ = writeln!(s, "seeds:       {:?}", self.seeds);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<28} {:>7} {:>10} {:>10} {:>12} {:>12}",
            "label", "horizon", "mse", "mae", "last-val mse", "last-val mae"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:>7} {:>10.4} {:>10.4} {:>12.4} {:>12.4}",
                r.label, r.horizon, r.mse_mean, r.mae_mean, r.baseline_mse, r.baseline_mae
            );
            if let (Some(m), Some(a)) = (r.raw_mse_mean, r.raw_mae_mean) {
                let _ = writeln!(s, "{:<28} {:>7} {:>10.4} {:>10.4}", "  (raw scale)", "", m, a);
            }
        }
        if !self.annotations.is_empty() {
            let _ = writeln!(s);
            for a in &self.annotations {
                let _ = writeln!(s, "note: {a}");
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "config: {}", self.config);
        s
    }

    /// Writes `<stem>.csv`, `<stem>.txt`, `<stem>.json` and the wall-clock
    /// sidecar `<stem>.timing.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<ReportPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = ReportPaths {
            csv: dir.join(format!("{stem}.csv")),
            text: dir.join(format!("{stem}.txt")),
            json: dir.join(format!("{stem}.json")),
            timing: dir.join(format!("{stem}.timing.json")),
        };
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))?;
        let timing: serde_json::Map<String, serde_json::Value> =
            self.timings.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
        let timing = serde_json::to_string_pretty(&timing).map_err(|e| Error::Report(e.to_string()))?;
        for (path, body) in [
            (&paths.csv, self.to_csv()?),
            (&paths.text, self.to_text()),
            (&paths.json, json),
            (&paths.timing, timing),
        ] {
            fs::write(path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(paths)
    }
}
