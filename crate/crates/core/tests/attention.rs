mod common;

use common::{grad_check_params, rand_tensor, rng, to_mats, OracleBlock, FD_TOL};
use proptest::prelude::*;
use rand::Rng as _;
use timeformer::attention::{
    aggregate, apply_modulation_and_mask, hawkes_modulation, raw_attention, MoSABlock, MoSAConfig,
};
use timeformer::tensor::{Mask, ParamStore, Tape, Tensor};

fn block(seed: u64, cfg: MoSAConfig) -> (MoSABlock, ParamStore) {
    let mut store = ParamStore::new();
    let b = MoSABlock::new(&mut store, &mut rng(seed), "blk", cfg).unwrap();
    (b, store)
}

fn run(block: &MoSABlock, store: &ParamStore, x: &Tensor, training: bool) -> (Tape, Tensor) {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, store, xv, training, None).unwrap();
    let out = tape.value(y);
    (tape, out)
}

/// Random running statistics so eval mode is not an identity normalization.
fn perturb_stats(block: &MoSABlock, store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let s = block.state();
    for v in store.get_mut(s.running_mean).data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    for v in store.get_mut(s.running_var).data_mut() {
        *v = r.random_range(0.5..2.0);
    }
}

#[test]
fn raw_attention_examples() {
    let mut tape = Tape::inference();
    let z = tape.constant(Tensor::zeros(&[3, 2]));
    let a = raw_attention(&mut tape, z, z, None).unwrap();
    assert!(tape.data(a).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    let one = tape.constant(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
    let a = raw_attention(&mut tape, one, one, None).unwrap();
    assert_eq!(tape.data(a), &[1.0]);

    // q·k/√d = 1 for the first key and 0 for the second.
    let q = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
    let k = tape.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
    let a = raw_attention(&mut tape, q, k, None);
    assert!(a.is_err(), "query and key must share T");
    let q2 = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let a = raw_attention(&mut tape, q2, k, None).unwrap();
    let e = std::f64::consts::E;
    assert!((tape.data(a)[0] - e / (e + 1.0)).abs() < 1e-15);
}

#[test]
fn modulation_mask_and_aggregate_examples() {
    let omega = hawkes_modulation(4, 0.1).unwrap();
    assert!((omega.get(&[3, 1]) - 0.81873).abs() < 1e-5);
    assert!(hawkes_modulation(0, 0.1).is_err());

    let mut tape = Tape::inference();
    let a = tape.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
    let masked = apply_modulation_and_mask(&mut tape, a, &hawkes_modulation(3, 0.0).unwrap(), true).unwrap();
    let m = tape.value(masked);
    for i in 0..3 {
        for j in 0..3 {
            let expected = if j <= i { 1.0 / 3.0 } else { 0.0 };
            assert_eq!(m.get(&[i, j]), expected);
        }
    }

    let eye = tape.constant(Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap());
    let v = tape.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let out = aggregate(&mut tape, eye, v).unwrap();
    assert_eq!(tape.data(out), tape.data(v));
    let zero = tape.constant(Tensor::new(&[2, 2], vec![0., 0., 1., 0.]).unwrap());
    let out = aggregate(&mut tape, zero, v).unwrap();
    assert_eq!(tape.data(out), &[0., 0., 0., 1., 2., 3.]);
}

#[test]
fn unmodulated_bidirectional_block_matches_oracle() {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let heads = [1, 2, 4][seed as usize % 3];
        let d_model = heads * r.random_range(1..=8usize);
        let input_dim = if seed % 2 == 0 { d_model } else { r.random_range(1..=6) };
        let t = r.random_range(1..=16usize);
        let batch = r.random_range(1..=3usize);
        let cfg = MoSAConfig {
            causal: false,
            input_dim,
            ..MoSAConfig::mosa(d_model, heads, 0.0)
        };
        let (blk, mut store) = block(seed, cfg);
        perturb_stats(&blk, &mut store, seed);
        let oracle = OracleBlock::from_block(&blk, &store);
        let x = rand_tensor(&mut r, &[batch, t, input_dim], -2.0, 2.0);
        let xs = to_mats(&x);
        for training in [true, false] {
            let (_, y) = run(&blk, &store, &x, training);
            let expected = oracle.forward(&xs, training);
            for (a, b) in to_mats(&y).iter().flatten().flatten().zip(expected.iter().flatten().flatten()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-10, "max abs diff {worst}");
}

#[test]
fn standard_config_matches_oracle() {
    let (blk, store) = block(3, MoSAConfig::standard(8, 2));
    let oracle = OracleBlock::from_block(&blk, &store);
    let x = rand_tensor(&mut rng(4), &[2, 7, 8], -1.0, 1.0);
    let (tape, y) = run(&blk, &store, &x, true);
    let expected = oracle.forward(&to_mats(&x), true);
    for (a, b) in to_mats(&y).iter().flatten().flatten().zip(expected.iter().flatten().flatten()) {
        assert!((a - b).abs() <= 1e-10);
    }
    let maps = blk.attention_matrices(&tape, 1).unwrap();
    let seq1 = &to_mats(&x)[1];
    for (m, o) in maps.iter().zip(oracle.attention(seq1, false)) {
        for (i, row) in o.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((m.get(i, j) - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn causal_block_ignores_the_future() {
    let mut failures = 0;
    for trial in 0..100u64 {
        let mut r = rng(1000 + trial);
        let t = r.random_range(2..=16usize);
        let gamma = [0.0, 0.01, 0.1, 1.0][trial as usize % 4];
        let input_dim = if trial % 3 == 0 { 3 } else { 8 };
        let cfg = MoSAConfig {
            input_dim,
            ..MoSAConfig::mosa(8, 2, gamma)
        };
        let (blk, mut store) = block(trial, cfg);
        perturb_stats(&blk, &mut store, trial);
        let x = rand_tensor(&mut r, &[2, t, input_dim], -1.0, 1.0);
        let pos = r.random_range(0..t);
        let mut bumped = x.clone();
        for b in 0..2 {
            for f in 0..input_dim {
                let idx = (b * t + pos) * input_dim + f;
                bumped.data_mut()[idx] += r.random_range(-3.0..3.0);
            }
        }
        let (_, y0) = run(&blk, &store, &x, false);
        let (_, y1) = run(&blk, &store, &bumped, false);
        let (a, b) = (to_mats(&y0), to_mats(&y1));
        let same = a.iter().zip(&b).all(|(sa, sb)| sa[..pos] == sb[..pos]);
        if !same {
            failures += 1;
        }
    }
    assert_eq!(failures, 0);
}

#[test]
fn decay_ratio_and_row_mass() {
    for (k, &gamma) in [0.01, 0.1, 1.0].iter().enumerate() {
        for &t in &[4usize, 16, 64] {
            let (blk, store) = block(k as u64 * 100 + t as u64, MoSAConfig::mosa(8, 2, gamma));
            let x = rand_tensor(&mut rng(t as u64), &[1, t, 8], -1.0, 1.0);
            let mut tape = Tape::inference();
            let xv = tape.constant(x);
            blk.forward(&mut tape, &store, xv, false, None).unwrap();
            let maps = blk.attention_matrices(&tape, 0).unwrap();
            let heads = blk.project_qkv(&mut tape, &store, xv).unwrap();
            for (h, m) in heads.iter().zip(&maps) {
                let raw = raw_attention(&mut tape, h.query, h.key, Some(&Mask::causal(t))).unwrap();
                let raw = tape.value(raw);
                assert!(m.upper_triangle_is_zero());
                for i in 0..t {
                    for j in 0..=i {
                        let ratio = m.get(i, j) / raw.get(&[0, i, j]);
                        let expected = (-gamma * (i - j) as f64).exp();
                        assert!((ratio - expected).abs() <= 1e-12, "γ={gamma} T={t} ({i},{j})");
                    }
                    let mass = m.row_mass(i);
                    assert!(mass > 0.0 && mass <= 1.0 + 1e-9, "row {i} mass {mass}");
                }
            }
        }
    }
}

#[test]
fn modulation_decays_monotonically_to_the_left() {
    for gamma in [0.01, 0.1, 1.0] {
        let omega = hawkes_modulation(32, gamma).unwrap();
        for i in 0..32 {
            for j in 1..=i {
                assert!(omega.get(&[i, j - 1]) < omega.get(&[i, j]));
            }
        }
    }
}

#[test]
fn single_token_passes_through() {
    let (blk, store) = block(9, MoSAConfig::mosa(4, 2, 0.1));
    let x = rand_tensor(&mut rng(9), &[3, 1, 4], -1.0, 1.0);
    let (tape, y) = run(&blk, &store, &x, false);
    assert_eq!(y.shape(), &[3, 1, 4]);
    for m in blk.attention_matrices(&tape, 2).unwrap() {
        assert_eq!(m.values, vec![1.0]);
    }
}

#[test]
fn project_qkv_matches_loop_products() {
    let (blk, store) = block(5, MoSAConfig { input_dim: 3, ..MoSAConfig::mosa(6, 3, 0.1) });
    let x = rand_tensor(&mut rng(5), &[4, 3], -1.0, 1.0);
    let oracle = OracleBlock::from_block(&blk, &store);
    let w_in = oracle.w_in.as_ref().unwrap();
    let lifted: Vec<Vec<f64>> = to_mats(&x)[0]
        .iter()
        .map(|row| (0..6).map(|c| (0..3).map(|f| row[f] * w_in[f][c]).sum()).collect())
        .collect();
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let heads = blk.project_qkv(&mut tape, &store, xv).unwrap();
    assert_eq!(heads.len(), 3);
    for (h, (wq, wk, wv)) in heads.iter().zip(&oracle.heads) {
        for (var, w) in [(h.query, wq), (h.key, wk), (h.value, wv)] {
            let got = tape.value(var);
            assert_eq!(got.shape(), &[4, 2]);
            for i in 0..4 {
                for c in 0..2 {
                    let expected: f64 = (0..6).map(|k| lifted[i][k] * w[k][c]).sum();
                    assert!((got.get(&[i, c]) - expected).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let cfg = MoSAConfig {
            input_dim: if seed % 2 == 0 { 4 } else { 3 },
            ..MoSAConfig::mosa(4, 2, [0.0, 0.1, 1.0][seed as usize % 3])
        };
        let (blk, mut store) = block(seed, cfg.clone());
        let mut r = rng(seed + 77);
        let x = rand_tensor(&mut r, &[2, 5, cfg.input_dim], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[2, 5, 4], -1.0, 1.0);
        let ids: Vec<_> = store.trainable().collect();
        let training = seed % 4 != 3;
        worst = worst.max(grad_check_params(&mut store, &ids, &x, |tape, store, xv| {
            let y = blk.forward(tape, store, xv, training, None).unwrap();
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv).unwrap();
            tape.sum(p)
        }));
    }
    assert!(worst < FD_TOL, "{worst}");
}

#[test]
fn head_count_must_divide_width() {
    let mut store = ParamStore::new();
    assert!(MoSABlock::new(&mut store, &mut rng(0), "b", MoSAConfig::mosa(6, 4, 0.1)).is_err());
    assert!(MoSABlock::new(&mut store, &mut rng(0), "b", MoSAConfig::mosa(6, 2, -1.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_rows_never_exceed_one(seed in 0u64..10_000, t in 1usize..12, gamma in 0.0f64..2.0) {
        let (blk, store) = block(seed, MoSAConfig::mosa(4, 1, gamma));
        let x = rand_tensor(&mut rng(seed), &[1, t, 4], -3.0, 3.0);
        let (tape, _) = run(&blk, &store, &x, false);
        let m = &blk.attention_matrices(&tape, 0).unwrap()[0];
        prop_assert!(m.upper_triangle_is_zero());
        for i in 0..t {
            let mass = m.row_mass(i);
            prop_assert!(mass > 0.0 && mass <= 1.0 + 1e-9);
        }
    }
}
