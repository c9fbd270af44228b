//! Command-line front end. [`run`] parses arguments, executes one command and
//! returns the process exit code: 0 on success, 1 on runtime errors and 2 on
//! usage errors.

pub mod export;
mod settings;

pub use export::{matrix_csv, matrix_pgm};
pub use settings::{Settings, KEYS};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::data::{load_csv, synthetic, synthetic_with_noise, SeriesDataset, Split, SplitSizes};
use crate::error::Error;
use crate::model::{Checkpoint, Stage};
use crate::train::{
    benchmark_attention, evaluate, evaluate_denormalized, last_value_baseline, run_ablation, run_point, sweep_gamma,
    sweep_scales, ExperimentSpec, ForecastReport, Mechanism, ReportRow, BENCH_TOKENS, GAMMA_GRID,
};

#[derive(Debug, Parser)]
#[command(name = "timeformer", version, about = "Multi-scale patch transformer with Hawkes-modulated attention")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model, write its checkpoint and a test report.
    Train(RunArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Compare the full model with its two ablations.
    Ablate(RunArgs),
    /// One model per decay rate.
    SweepGamma(SweepGammaArgs),
    /// One model per number of scales.
    SweepScales(SweepScalesArgs),
    /// Time standard against modulated attention.
    Bench(BenchArgs),
    /// Write one head's attention matrix as CSV and PGM.
    ExportAttention(ExportArgs),
    /// Generate a synthetic series as CSV.
    Synth(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV file with a header row.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<String>,
    /// ar1 | sine_mix | trend_season_noise
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Named split sizes, e.g. etth1.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    timestamp_column: Option<String>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Comma-separated horizons, e.g. 96,192.
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_hidden: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    mask_padding: bool,
    #[arg(long)]
    renormalize: bool,
    /// visible | full
    #[arg(long)]
    normalizer: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    plateau_halving: Option<usize>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    out: Option<String>,
    /// Also report raw-scale metrics.
    #[arg(long)]
    denormalized: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct SweepGammaArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated decay rates.
    #[arg(long)]
    gammas: Option<String>,
}

#[derive(Debug, Args)]
struct SweepScalesArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated scale counts.
    #[arg(long, default_value = "1,2,3,4")]
    scale_values: String,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Comma-separated token counts.
    #[arg(long)]
    tokens: Option<String>,
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// intra | inter | flat
    #[arg(long, default_value = "intra")]
    stage: String,
    #[arg(long, default_value_t = 1)]
    scale: usize,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    /// Patch of an intra-patch block; defaults to the most recent one.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, default_value = "test")]
    split: String,
    /// Window index within the split.
    #[arg(long, default_value_t = 0)]
    window: usize,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

// Writes a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Outcome {
    match command {
        Command::Train(a) => cmd_train(&a.settings()?),
        Command::Eval(a) => cmd_eval(&a.run.settings()?, &a.checkpoint, parse_split(&a.split)?),
        Command::Ablate(a) => cmd_ablate(&a.settings()?),
        Command::SweepGamma(a) => {
            let gammas = match &a.gammas {
                Some(list) => parse_list(list)?,
                None => GAMMA_GRID.to_vec(),
            };
            cmd_sweep_gamma(&a.run.settings()?, &gammas)
        }
        Command::SweepScales(a) => cmd_sweep_scales(&a.run.settings()?, &parse_list(&a.scale_values)?),
        Command::Bench(a) => cmd_bench(&a),
        Command::ExportAttention(a) => cmd_export_attention(&a),
        Command::Synth(a) => cmd_synth(&a.settings()?),
    }
}

impl RunArgs {
    fn settings(&self) -> std::result::Result<Settings, Failure> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path).map_err(Failure::Usage)?;
        }
        let mut pairs: Vec<(&str, String)> = Vec::new();
        macro_rules! flag {
            ($($key:literal => $field:ident),* $(,)?) => {
                $( if let Some(v) = &self.$field { pairs.push(($key, v.to_string())); } )*
            };
        }
        flag!(
            "data" => data, "synthetic" => synthetic, "length" => length, "channels" => channels,
            "noise" => noise, "preset" => preset, "timestamp-column" => timestamp_column,
            "lookback" => lookback, "horizon" => horizon, "horizons" => horizons, "scales" => scales,
            "gamma" => gamma, "variant" => variant, "d-model" => d_model, "heads" => heads,
            "ffn-hidden" => ffn_hidden, "kernel" => kernel, "depth" => depth, "activation" => activation,
            "normalizer" => normalizer, "epochs" => epochs, "batch-size" => batch_size, "lr" => lr,
            "seed" => seed, "repeats" => repeats, "patience" => patience,
            "plateau-halving" => plateau_halving, "max-batches" => max_batches, "out" => out,
        );
        for (key, on) in [
            ("mask-padding", self.mask_padding),
            ("renormalize", self.renormalize),
            ("denormalized", self.denormalized),
        ] {
            if on {
                pairs.push((key, "true".into()));
            }
        }
        for (k, v) in pairs {
            s.set(k, &v).map_err(Failure::Usage)?;
        }
        if s.data.is_some() && s.synthetic.is_some() {
            return Err(Failure::Usage("--data and --synthetic are mutually exclusive".into()));
        }
        s.model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        s.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(s)
    }
}

fn parse_list<T: std::str::FromStr>(list: &str) -> std::result::Result<Vec<T>, Failure> {
    list.split(',')
        .map(|v| v.trim().parse().map_err(|_| Failure::Usage(format!("invalid list entry '{v}'"))))
        .collect()
}

fn parse_split(s: &str) -> std::result::Result<Split, Failure> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

/// Raw (unnormalized) dataset described by the settings, with its label.
fn raw_dataset(s: &Settings) -> std::result::Result<(SeriesDataset, String), Failure> {
    let (mut data, label) = match (&s.data, s.synthetic) {
        (Some(path), _) => (load_csv(path, s.timestamp_column.as_deref())?, path.display().to_string()),
        (None, Some(kind)) => {
            let data = match s.noise {
                Some(noise) => synthetic_with_noise(kind, s.length, s.channels, s.train.seed, noise)?,
                None => synthetic(kind, s.length, s.channels, s.train.seed)?,
            };
            let noise = s.noise.unwrap_or(kind.default_noise());
            let label = format!("synthetic:{kind}:len={}:n={}:seed={}:noise={noise}", s.length, s.channels, s.train.seed);
            (data, label)
        }
        (None, None) => return Err(Failure::Usage("provide --data PATH or --synthetic KIND".into())),
    };
    if let Some(preset) = &s.preset {
        let sizes = SplitSizes::preset(preset).map_err(|e| Failure::Usage(e.to_string()))?;
        data.set_splits(sizes)?;
    }
    Ok((data, label))
}

fn dataset(s: &Settings) -> std::result::Result<(SeriesDataset, String), Failure> {
    let (mut data, label) = raw_dataset(s)?;
    for w in data.normalize()? {
        warn!("{w}");
    }
    info!("{label}: {} rows x {} channels, splits {:?}", data.len(), data.channels(), data.splits());
    Ok((data, label))
}

fn spec(s: &Settings, label: String) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(label, s.model.clone(), s.train.clone());
    spec.horizons = s.horizon_list();
    spec.denormalized = s.denormalized;
    spec
}

fn finish(report: &ForecastReport, out: &Path, stem: &str) -> Outcome {
    report.check_means()?;
    let paths = report.write(out, stem)?;
    say!("{}", report.to_text().trim_end());
    say!("wrote {}", paths.csv.display());
    Ok(())
}

fn cmd_train(s: &Settings) -> Outcome {
    let (data, label) = dataset(s)?;
    let spec = spec(s, label);
    let mut report = ForecastReport::new("train", &spec, spec.seeds())?;
    fs::create_dir_all(&s.out).map_err(|e| Error::io(&s.out, e))?;
    for &h in &spec.horizons {
        let mut cfg = s.model.clone();
        cfg.horizon = h;
        let outcome = run_point(&data, cfg.variant.as_str(), &cfg, &s.train, s.denormalized)?;
        let ckpt_path = if spec.horizons.len() == 1 {
            s.out.join("model.ckpt")
        } else {
            s.out.join(format!("model_h{h}.ckpt"))
        };
        let checkpoint = Checkpoint {
            model: outcome.models[0].clone(),
            normalization: data.norm_stats().cloned(),
        };
        checkpoint.save(&ckpt_path)?;
        let history = serde_json::to_string_pretty(&outcome.histories).map_err(|e| Error::Report(e.to_string()))?;
        let hist_path = s.out.join(format!("history_h{h}.json"));
        fs::write(&hist_path, history).map_err(|e| Error::io(&hist_path, e))?;
        say!("wrote {}", ckpt_path.display());
        report.timings.push((format!("h{h}"), outcome.seconds));
        report.rows.push(outcome.row);
    }
    finish(&report, &s.out, "train")
}

fn cmd_eval(s: &Settings, checkpoint: &Path, split: Split) -> Outcome {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (data, label) = dataset(s)?;
    if let (Some(saved), Some(now)) = (&ckpt.normalization, data.norm_stats()) {
        if saved != now {
            warn!("dataset normalization differs from the one stored in the checkpoint");
        }
    }
    let model = &ckpt.model;
    let cfg = model.config();
    let mut spec = spec(s, label);
    spec.model = cfg.clone();
    spec.horizons = vec![cfg.horizon];
    let metrics = evaluate(model, &data, split)?;
    let base = last_value_baseline(&data, split, cfg.lookback, cfg.horizon, false)?;
    let mut row = ReportRow::new(cfg.variant.as_str(), cfg.horizon, vec![metrics.mse], vec![metrics.mae]);
    row.baseline_mse = base.mse;
    row.baseline_mae = base.mae;
    if s.denormalized {
        let raw = evaluate_denormalized(model, &data, split)?;
        row.raw_mse_mean = Some(raw.mse);
        row.raw_mae_mean = Some(raw.mae);
    }
    let mut report = ForecastReport::new("eval", &spec, vec![model.seed()])?;
    report.annotations.push(format!("{split:?} split, {} windows", metrics.windows));
    report.rows.push(row);
    finish(&report, &s.out, "eval")
}

fn cmd_ablate(s: &Settings) -> Outcome {
    let (data, label) = dataset(s)?;
    let report = run_ablation(&data, &spec(s, label))?;
    finish(&report, &s.out, "ablation")
}

fn cmd_sweep_gamma(s: &Settings, gammas: &[f64]) -> Outcome {
    let (data, label) = dataset(s)?;
    let report = sweep_gamma(&data, &spec(s, label), gammas)?;
    finish(&report, &s.out, "sweep_gamma")
}

fn cmd_sweep_scales(s: &Settings, scales: &[usize]) -> Outcome {
    let (data, label) = dataset(s)?;
    let report = sweep_scales(&data, &spec(s, label), scales)?;
    finish(&report, &s.out, "sweep_scales")
}

fn cmd_bench(a: &BenchArgs) -> Outcome {
    let tokens = match &a.tokens {
        Some(list) => parse_list(list)?,
        None => BENCH_TOKENS.to_vec(),
    };
    let report = benchmark_attention(&tokens, a.d, a.gamma, a.rounds, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join("bench.csv");
    fs::write(&path, report.to_csv()?).map_err(|e| Error::io(&path, e))?;
    for r in &report.rows {
        say!("T={:<5} {:<4} {:.3e} s", r.tokens, r.mechanism.as_str(), r.seconds);
    }
    if tokens.len() >= 2 {
        say!("sa log-log slope: {:.3}", report.log_log_slope(Mechanism::Standard)?);
    }
    let last = *tokens.last().expect("non-empty token list");
    if let Some(ratio) = report.overhead_ratio(last) {
        say!("mosa/sa at T={last}: {ratio:.3}");
    }
    say!("wrote {}", path.display());
    Ok(())
}

fn cmd_export_attention(a: &ExportArgs) -> Outcome {
    let s = a.run.settings()?;
    let stage: Stage = a.stage.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let split = parse_split(&a.split)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = &ckpt.model;
    let (lh, lf) = (model.config().lookback, model.config().horizon);
    let (data, _) = dataset(&s)?;
    if a.channel >= data.channels() {
        return Err(Error::Config(format!("channel {} out of range (dataset has {})", a.channel, data.channels())).into());
    }
    let starts = data.window_starts(data.range(split), lh, lf);
    let start = *starts
        .get(a.window)
        .ok_or_else(|| Error::Config(format!("window {} out of range ({} windows)", a.window, starts.len())))?;
    let history: Vec<f64> = (start..start + lh).map(|r| data.value(r, a.channel)).collect();
    let maps = model.attention_maps(&history, stage, a.scale, a.layer)?;
    let seq = a.patch.unwrap_or(maps.len() - 1);
    let heads = maps
        .get(seq)
        .ok_or_else(|| Error::Config(format!("patch {seq} out of range ({} patches)", maps.len())))?;
    let matrix = heads
        .get(a.head)
        .ok_or_else(|| Error::Config(format!("head {} out of range ({} heads)", a.head, heads.len())))?;
    let causal = model
        .block(stage, a.scale, a.layer)
        .is_some_and(|b| b.config().causal);
    if causal && !matrix.upper_triangle_is_zero() {
        return Err(Error::Contract("attention matrix has non-zero entries above the diagonal".into()).into());
    }
    fs::create_dir_all(&s.out).map_err(|e| Error::io(&s.out, e))?;
    let stem = format!("attention_{}_s{}_l{}_h{}", a.stage, a.scale, a.layer, a.head);
    let csv_path = s.out.join(format!("{stem}.csv"));
    let pgm_path = s.out.join(format!("{stem}.pgm"));
    fs::write(&csv_path, matrix_csv(matrix)).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&pgm_path, matrix_pgm(matrix)).map_err(|e| Error::io(&pgm_path, e))?;
    say!("wrote {} and {} ({}x{})", csv_path.display(), pgm_path.display(), matrix.size, matrix.size);
    Ok(())
}

fn cmd_synth(s: &Settings) -> Outcome {
    if s.synthetic.is_none() {
        return Err(Failure::Usage("synth needs --synthetic KIND".into()));
    }
    let (data, label) = raw_dataset(s)?;
    fs::create_dir_all(&s.out).map_err(|e| Error::io(&s.out, e))?;
    let kind = s.synthetic.expect("checked above");
    let path = s.out.join(format!("{kind}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Report(e.to_string()))?;
    w.write_record(data.columns()).map_err(|e| Error::Report(e.to_string()))?;
    for row in data.values().chunks(data.channels()) {
        w.write_record(row.iter().map(f64::to_string))
            .map_err(|e| Error::Report(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let cache = s.out.join(format!("{kind}.mosadata"));
    data.save_cache(&cache)?;
    say!("{label}: wrote {} and {}", path.display(), cache.display());
    Ok(())
}
