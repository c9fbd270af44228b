mod common;

use common::{rand_tensor, rng};
use rand::Rng as _;
use timeformer::data::{synthetic, SeriesDataset, Split, SplitSizes, SyntheticKind};
use timeformer::model::{ModelConfig, TimeFormer, Variant};
use timeformer::train::{
    evaluate, evaluate_with, last_value_baseline, last_value_forecast, mae, mse, run_point, run_points, train,
    ExperimentSpec, ForecastReport, TrainConfig,
};
use timeformer::tensor::Tensor;
use timeformer::Error;

fn tiny_model(horizon: usize) -> ModelConfig {
    ModelConfig {
        lookback: 16,
        horizon,
        d_model: 8,
        num_heads: 2,
        ffn_hidden: 16,
        ..ModelConfig::default()
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        repeats: 1,
        ..TrainConfig::default()
    }
}

fn sine_data(len: usize) -> SeriesDataset {
    let mut d = synthetic(SyntheticKind::SineMix, len, 2, 1).unwrap();
    d.normalize().unwrap();
    d
}

#[test]
fn metrics_match_loop_oracles() {
    let mut r = rng(1);
    for _ in 0..100 {
        let shape = [r.random_range(1..6), r.random_range(1..8)];
        let a = rand_tensor(&mut r, &shape, -3.0, 3.0);
        let b = rand_tensor(&mut r, &shape, -3.0, 3.0);
        let n = a.numel() as f64;
        let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let ab: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!((mse(&a, &b).unwrap() - sq / n).abs() < 1e-12);
        assert!((mae(&a, &b).unwrap() - ab / n).abs() < 1e-12);
    }
    assert!(mse(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    assert!(mae(&Tensor::zeros(&[0]), &Tensor::zeros(&[0])).is_err());
    let x = Tensor::new(&[1, 3], vec![1., 2., 3.]).unwrap();
    let y = Tensor::new(&[1, 3], vec![1., 2., 5.]).unwrap();
    assert!((mse(&x, &y).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    assert!((mae(&x, &y).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn last_value_forecast_repeats_the_final_step() {
    let h = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let f = last_value_forecast(&h, 2).unwrap();
    assert_eq!(f.data(), &[3., 3., 6., 6.]);
}

#[test]
fn smoke_run_on_ten_windows() {
    // 16 + 4 + 9 rows in train gives exactly ten windows.
    let mut d = synthetic(SyntheticKind::Ar1, 29 + 25 + 25, 1, 2).unwrap();
    d.set_splits(SplitSizes::new(29, 25, 25)).unwrap();
    d.normalize().unwrap();
    assert_eq!(d.window_starts(d.range(Split::Train), 16, 4).len(), 10);
    let mut m = TimeFormer::new(tiny_model(4), 0).unwrap();
    let h = train(&mut m, &d, &tiny_train(2)).unwrap();
    assert_eq!(h.train_loss.len(), 2);
    assert_eq!(h.steps, 2);
    assert!(h.val_mse.iter().all(|v| v.is_some()));
    let test = evaluate(&m, &d, Split::Test).unwrap();
    assert_eq!(test.windows, 6);
    assert!(test.mse.is_finite());
}

#[test]
fn second_epoch_is_no_worse_than_first() {
    let d = sine_data(600);
    let mut m = TimeFormer::new(tiny_model(8), 3).unwrap();
    let h = train(&mut m, &d, &tiny_train(2)).unwrap();
    assert!(h.train_loss[1] <= h.train_loss[0], "{:?}", h.train_loss);
}

#[test]
fn training_is_deterministic() {
    let d = sine_data(400);
    let run = || {
        let mut m = TimeFormer::new(tiny_model(8), 4).unwrap();
        let h = train(&mut m, &d, &tiny_train(2)).unwrap();
        (h, m.predict(&d.channel_batch(&[300], 16, 8).unwrap().0).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn repeats_use_distinct_seeds_and_report_the_mean() {
    let d = sine_data(400);
    let cfg = TrainConfig { repeats: 2, ..tiny_train(1) };
    let out = run_point(&d, "full", &tiny_model(8), &cfg, false).unwrap();
    assert_eq!(out.models.len(), 2);
    assert_ne!(out.models[0].seed(), out.models[1].seed());
    assert_ne!(out.row.mse[0], out.row.mse[1]);
    assert!((out.row.mse_mean - (out.row.mse[0] + out.row.mse[1]) / 2.0).abs() < 1e-12);
    assert!((out.row.mae_mean - (out.row.mae[0] + out.row.mae[1]) / 2.0).abs() < 1e-12);
    let spec = ExperimentSpec::new("sine", tiny_model(8), cfg);
    assert_eq!(spec.seeds(), out.models.iter().map(|m| m.seed()).collect::<Vec<_>>());
}

#[test]
fn memorizes_a_periodic_series() {
    // A clean period-8 wave: one pattern repeated, easy to fit.
    let values: Vec<f64> = (0..300).map(|t| (t as f64 * std::f64::consts::TAU / 8.0).sin()).collect();
    let mut d = SeriesDataset::new(values, vec!["wave".into()]).unwrap();
    d.normalize().unwrap();
    let mut m = TimeFormer::new(ModelConfig { gamma: 0.0, ..tiny_model(4) }, 5).unwrap();
    let before = evaluate(&m, &d, Split::Train).unwrap().mse;
    train(&mut m, &d, &TrainConfig { lr: 0.01, ..tiny_train(15) }).unwrap();
    let after = evaluate(&m, &d, Split::Train).unwrap().mse;
    assert!(after < 0.1 * before && after < 0.05, "before {before} after {after}");
}

#[test]
fn zero_window_splits_are_errors() {
    let d = sine_data(60);
    let err = evaluate_with(&d, Split::Val, 16, 8, false, |x| Ok(x.clone())).unwrap_err();
    assert!(matches!(err, Error::Report(_)));
    assert!(last_value_baseline(&d, Split::Test, 16, 8, false).is_err());
    let mut m = TimeFormer::new(ModelConfig { lookback: 48, ..tiny_model(8) }, 0).unwrap();
    assert!(matches!(train(&mut m, &d, &tiny_train(1)), Err(Error::Config(_))));
}

#[test]
fn forecast_shapes_follow_each_horizon() {
    for h in [24, 48, 96, 192, 336, 720] {
        let m = TimeFormer::new(ModelConfig { lookback: 96, horizon: h, ..tiny_model(h) }, 0).unwrap();
        let y = m.predict(&Tensor::zeros(&[2, 96])).unwrap();
        assert_eq!(y.shape(), &[2, h]);
    }
}

#[test]
fn divergence_is_reported_with_its_step() {
    let values: Vec<f64> = (0..400).map(|t| 1e5 * ((t % 7) as f64)).collect();
    let d = SeriesDataset::new(values, vec!["big".into()]).unwrap();
    let mut m = TimeFormer::new(tiny_model(4), 0).unwrap();
    match train(&mut m, &d, &tiny_train(1)) {
        Err(Error::Training { epoch, step, .. }) => assert_eq!((epoch, step), (1, 1)),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn variants_share_a_report() {
    let d = sine_data(400);
    let spec = ExperimentSpec::new("sine", tiny_model(8), tiny_train(1));
    let points = [Variant::Full, Variant::NoSegmentation]
        .into_iter()
        .map(|v| (v.as_str().to_string(), ModelConfig { variant: v, ..tiny_model(8) }))
        .collect();
    let report: ForecastReport = run_points(&d, &spec, "pair", points).unwrap();
    assert_eq!(report.rows.len(), 2);
    report.check_means().unwrap();
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(report.rows[0].baseline_mse, report.rows[1].baseline_mse);
}
