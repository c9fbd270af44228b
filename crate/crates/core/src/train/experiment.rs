use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, evaluate_denormalized, last_value_baseline};
use super::fit::{train, History, TrainConfig};
use super::parallel::parallel_map;
use super::report::{ForecastReport, ReportRow};
use crate::data::{SeriesDataset, Split};
use crate::error::{config_err, Result};
use crate::model::{ModelConfig, TimeFormer, Variant};
use crate::rng::derive_seed;

/// Decay rates swept by [`sweep_gamma`].
pub const GAMMA_GRID: [f64; 7] = [0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0];

/// Variants compared by [`run_ablation`].
pub const ABLATION_VARIANTS: [Variant; 3] = [Variant::Full, Variant::NoSegmentation, Variant::StandardAttention];

/// Shared settings of an experiment; serialized into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Free-form description of the data, e.g. a path or a synthetic spec.
    pub data: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub horizons: Vec<usize>,
    /// Also report metrics on the raw scale.
    pub denormalized: bool,
}

impl ExperimentSpec {
    pub fn new(data: impl Into<String>, model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            data: data.into(),
            horizons: vec![model.horizon],
            model,
            train,
            denormalized: false,
        }
    }

    /// Seed of repeat `r`; used for both initialization and window order.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        derive_seed(self.train.seed, r as u64)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.train.repeats).map(|r| self.repeat_seed(r)).collect()
    }
}

/// Trained models and metrics of one configuration over all repeats.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: ReportRow,
    pub models: Vec<TimeFormer>,
    pub histories: Vec<History>,
    pub seconds: f64,
}

/// Trains `train.repeats` models of `model` and scores each on the test split.
pub fn run_point(
    data: &SeriesDataset,
    label: &str,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    denormalized: bool,
) -> Result<RunOutcome> {
    model.validate()?;
    train_cfg.validate()?;
    let clock = Instant::now();
    let baseline = last_value_baseline(data, Split::Test, model.lookback, model.horizon, false)?;
    let (mut mse, mut mae, mut raw_mse, mut raw_mae) = (vec![], vec![], vec![], vec![]);
    let (mut models, mut histories) = (vec![], vec![]);
    for r in 0..train_cfg.repeats {
        let seed = derive_seed(train_cfg.seed, r as u64);
        let mut m = TimeFormer::new(model.clone(), seed)?;
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let history = train(&mut m, data, &cfg)?;
        let test = evaluate(&m, data, Split::Test)?;
        info!("{label} h={} repeat {r}: test mse {:.5} mae {:.5}", model.horizon, test.mse, test.mae);
        mse.push(test.mse);
        mae.push(test.mae);
        if denormalized {
            let raw = evaluate_denormalized(&m, data, Split::Test)?;
            raw_mse.push(raw.mse);
            raw_mae.push(raw.mae);
        }
        models.push(m);
        histories.push(history);
    }
    let mut row = ReportRow::new(label, model.horizon, mse, mae);
    row.baseline_mse = baseline.mse;
    row.baseline_mae = baseline.mae;
    row.best_epochs = histories.iter().map(|h| h.best_epoch).collect();
    if denormalized {
        row.raw_mse_mean = Some(super::metrics::mean(&raw_mse));
        row.raw_mae_mean = Some(super::metrics::mean(&raw_mae));
    }
    Ok(RunOutcome {
        row,
        models,
        histories,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Runs every labelled configuration at every horizon of `spec`, fanning the
/// points out over worker threads. Each point uses the same seed set.
pub fn run_points(
    data: &SeriesDataset,
    spec: &ExperimentSpec,
    experiment: &str,
    points: Vec<(String, ModelConfig)>,
) -> Result<ForecastReport> {
    if points.is_empty() || spec.horizons.is_empty() {
        return Err(config_err!("experiment '{}' has nothing to run", experiment));
    }
    let jobs: Vec<(String, ModelConfig)> = points
        .into_iter()
        .flat_map(|(label, cfg)| {
            spec.horizons.iter().map(move |&h| {
                let mut c = cfg.clone();
                c.horizon = h;
                (label.clone(), c)
            })
        })
        .collect();
    let outcomes = parallel_map(&jobs, |_, (label, cfg)| run_point(data, label, cfg, &spec.train, spec.denormalized));
    let mut report = ForecastReport::new(experiment, spec, spec.seeds())?;
    for ((label, cfg), outcome) in jobs.iter().zip(outcomes) {
        let outcome = outcome?;
        report.timings.push((format!("{label}/h{}", cfg.horizon), outcome.seconds));
        report.rows.push(outcome.row);
    }
    Ok(report)
}

/// Full model against its no-segmentation and standard-attention ablations.
pub fn run_ablation(data: &SeriesDataset, spec: &ExperimentSpec) -> Result<ForecastReport> {
    run_variants(data, spec, "ablation", &ABLATION_VARIANTS)
}

pub fn run_variants(
    data: &SeriesDataset,
    spec: &ExperimentSpec,
    experiment: &str,
    variants: &[Variant],
) -> Result<ForecastReport> {
    let points = variants
        .iter()
        .map(|&v| {
            let mut c = spec.model.clone();
            c.variant = v;
            (v.as_str().to_string(), c)
        })
        .collect();
    run_points(data, spec, experiment, points)
}

/// One model per decay rate.
pub fn sweep_gamma(data: &SeriesDataset, spec: &ExperimentSpec, gammas: &[f64]) -> Result<ForecastReport> {
    let points = gammas
        .iter()
        .map(|&g| {
            let mut c = spec.model.clone();
            c.gamma = g;
            (format!("gamma={g}"), c)
        })
        .collect();
    let mut report = run_points(data, spec, "sweep_gamma", points)?;
    report
        .annotations
        .push("reference optimum: gamma=0.1 on ETTh1 and ETTm1, gamma=0.05 on Weather".into());
    Ok(report)
}

/// One model per number of scales.
pub fn sweep_scales(data: &SeriesDataset, spec: &ExperimentSpec, scales: &[usize]) -> Result<ForecastReport> {
    let points = scales
        .iter()
        .map(|&s| {
            let mut c = spec.model.clone();
            c.num_scales = s;
            (format!("scales={s}"), c)
        })
        .collect();
    let mut report = run_points(data, spec, "sweep_scales", points)?;
    report
        .annotations
        .push("reference optimum: S=1 on ETTh1, S=3 on ETTm1, S=4 on Weather".into());
    Ok(report)
}
