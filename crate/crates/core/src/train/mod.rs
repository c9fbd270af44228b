//! Training, evaluation, experiment runners and the attention benchmark.

mod bench;
mod eval;
mod experiment;
mod fit;
mod metrics;
mod parallel;
mod report;

pub use bench::{attention_forward, benchmark_attention, BenchReport, BenchRow, Mechanism, BENCH_TOKENS};
pub use eval::{evaluate, evaluate_denormalized, evaluate_with, last_value_baseline, Metrics};
pub use experiment::{
    run_ablation, run_point, run_points, run_variants, sweep_gamma, sweep_scales, ExperimentSpec, RunOutcome,
    ABLATION_VARIANTS, GAMMA_GRID,
};
pub use fit::{mse_loss, train, History, TrainConfig, DIVERGENCE_LIMIT};
pub use metrics::{last_value_forecast, mae, mse};
pub use parallel::{parallel_map, worker_threads, THREADS_ENV};
pub use report::{config_hash, ForecastReport, ReportPaths, ReportRow};

/// Prediction lengths used in the long-horizon benchmarks.
pub const STANDARD_HORIZONS: [usize; 6] = [24, 48, 96, 192, 336, 720];
