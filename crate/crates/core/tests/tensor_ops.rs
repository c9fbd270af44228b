mod common;

use common::{grad_check, rand_away_from_zero, rand_tensor, rng, FD_TOL};
use proptest::prelude::*;
use timeformer::tensor::{Adam, Mask, ParamStore, Tape, Tensor, Var};
use timeformer::Error;

const INSTANCES: u64 = 20;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn eval(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&mut tape, &vars);
    tape.value(y)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

/// Runs `grad_check` on `INSTANCES` random instances and returns the worst error.
fn sweep(make: impl Fn(&mut timeformer::rng::Rng) -> Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + Copy) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = rng(seed);
            let inputs = make(&mut r);
            grad_check(seed, &inputs, build)
        })
        .fold(0.0, f64::max)
}

// ---- forward examples ---------------------------------------------------

#[test]
fn matmul_examples() {
    let y = eval(&[t(&[2, 2], &[1., 0., 0., 1.]), t(&[2, 1], &[3., 4.])], |tp, v| tp.matmul(v[0], v[1]).unwrap());
    assert_eq!(y.data(), &[3., 4.]);
    let y = eval(&[t(&[1, 2], &[1., 2.]), t(&[2, 1], &[3., 4.])], |tp, v| tp.matmul(v[0], v[1]).unwrap());
    assert_eq!(y.data(), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let mut r = rng(7);
    let a = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone().with_grad());
    let bv = tape.constant(b.clone());
    let y = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    let g = tape.grad(av).unwrap();
    for i in 0..4 {
        for k in 0..5 {
            let expected: f64 = (0..3).map(|j| b.get(&[k, j])).sum();
            assert!((g[i * 5 + k] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let sm = |x: &[f64]| eval(&[t(&[x.len()], x)], |tp, v| tp.softmax_lastdim(v[0]).unwrap());
    assert_eq!(sm(&[0., 0.]).data(), &[0.5, 0.5]);
    let big = sm(&[1000., 0.]);
    assert!(big.data().iter().all(|v| v.is_finite()));
    assert!((big.data()[0] - 1.0).abs() < 1e-15 && big.data()[1] < 1e-300);
    assert_close(sm(&[1., 2., 3.]).data(), &[0.09003057, 0.24472847, 0.66524096], 1e-8);

    let mut tape = Tape::new();
    let e = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(matches!(tape.softmax_lastdim(e), Err(Error::Dimension(_))));
}

#[test]
fn masked_softmax_zeroes_dropped_entries() {
    let mask = Mask::causal(3);
    let y = eval(&[Tensor::zeros(&[3, 3])], |tp, v| tp.softmax_lastdim_masked(v[0], &mask).unwrap());
    assert_close(y.data(), &[1., 0., 0., 0.5, 0.5, 0., 1. / 3., 1. / 3., 1. / 3.], 1e-15);
}

#[test]
fn avg_pool_examples() {
    let pool = |x: &[f64], k, s| eval(&[t(&[x.len()], x)], move |tp, v| tp.avg_pool1d(v[0], k, s).unwrap());
    assert_eq!(pool(&[1., 2., 3., 4.], 2, 2).data(), &[1.5, 3.5]);
    assert_eq!(pool(&[1., 2., 3., 4., 5.], 2, 2).data(), &[1.5, 3.5]);
    let x = [0.3, -1.0, 2.5];
    assert_eq!(pool(&x, 1, 1).data(), &x);
    let mut tape = Tape::new();
    let v = tape.constant(t(&[2], &[1., 2.]));
    assert!(matches!(tape.avg_pool1d(v, 3, 1), Err(Error::Dimension(_))));
}

#[test]
fn avg_pool_matches_window_enumeration() {
    let mut r = rng(3);
    for len in 1..30 {
        for k in 1..=len.min(5) {
            for s in 1..=3 {
                let x = rand_tensor(&mut r, &[len], -1.0, 1.0);
                let y = eval(&[x.clone()], |tp, v| tp.avg_pool1d(v[0], k, s).unwrap());
                let expected: Vec<f64> = (0..)
                    .map(|w| w * s)
                    .take_while(|&start| start + k <= len)
                    .map(|start| x.data()[start..start + k].iter().sum::<f64>() / k as f64)
                    .collect();
                assert_eq!(y.numel(), (len - k) / s + 1);
                assert_close(y.data(), &expected, 1e-14);
            }
        }
    }
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (len, cin) = (x.shape()[0], x.shape()[1]);
    let (k, cout) = (w.shape()[0], w.shape()[2]);
    let pad = k as isize / 2;
    let mut out = vec![0.0; len * cout];
    for l in 0..len {
        for o in 0..cout {
            let mut s = b.data()[o];
            for tap in 0..k {
                let src = l as isize + tap as isize - pad;
                if src < 0 || src >= len as isize {
                    continue;
                }
                for c in 0..cin {
                    s += x.get(&[src as usize, c]) * w.get(&[tap, c, o]);
                }
            }
            out[l * cout + o] = s;
        }
    }
    out
}

#[test]
fn conv1d_examples() {
    let conv = |x: Tensor, w: Tensor, b: Tensor| eval(&[x, w, b], |tp, v| tp.conv1d(v[0], v[1], v[2]).unwrap());
    let y = conv(t(&[2, 1], &[5., 7.]), t(&[1, 1, 1], &[1.]), t(&[1], &[0.]));
    assert_eq!(y.data(), &[5., 7.]);
    let y = conv(t(&[4, 1], &[1., 2., 3., 4.]), Tensor::zeros(&[3, 1, 1]), t(&[1], &[2.]));
    assert_eq!(y.data(), &[2.; 4]);

    let mut r = rng(11);
    for _ in 0..10 {
        let x = rand_tensor(&mut r, &[6, 2], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[3, 2, 4], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[4], -1.0, 1.0);
        let y = conv(x.clone(), w.clone(), b.clone());
        assert_close(y.data(), &conv_oracle(&x, &w, &b), 1e-12);
    }

    let mut tape = Tape::new();
    let (x, w, b) = (
        tape.constant(Tensor::zeros(&[4, 1])),
        tape.constant(Tensor::zeros(&[2, 1, 1])),
        tape.constant(Tensor::zeros(&[1])),
    );
    assert!(matches!(tape.conv1d(x, w, b), Err(Error::Config(_))));
}

#[test]
fn elementwise_and_shape_examples() {
    let y = eval(&[t(&[2], &[-1., 2.])], |tp, v| tp.relu(v[0]));
    assert_eq!(y.data(), &[0., 2.]);
    let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
    let y = eval(&[x.clone()], |tp, v| tp.reshape(v[0], &[6]).unwrap());
    assert_eq!(y.data(), x.data());
    let y = eval(&[x.clone()], |tp, v| tp.transpose_last2(v[0]).unwrap());
    assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
    let y = eval(&[x.clone(), x.clone()], |tp, v| tp.concat(&[v[0], v[1]], 1).unwrap());
    assert_eq!(y.shape(), &[2, 6]);
    assert_eq!(&y.data()[..6], &[1., 2., 3., 1., 2., 3.]);
    let y = eval(&[x.clone()], |tp, v| tp.slice(v[0], 1, 1, 2).unwrap());
    assert_eq!(y.data(), &[2., 3., 5., 6.]);
    let y = eval(&[x.clone()], |tp, v| tp.mean(v[0]).unwrap());
    assert_eq!(y.data(), &[3.5]);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
    assert!(matches!(tape.reshape(a, &[5]), Err(Error::Dimension(_))));
}

#[test]
fn exp_gradient_at_zero_is_one() {
    let err = grad_check(0, &[t(&[1], &[0.0])], |tp, v| tp.exp(v[0]));
    assert!(err < FD_TOL);
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[0.0]).with_grad());
    let y = tape.exp(x);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert!((tape.grad(x).unwrap()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn batchnorm_examples() {
    // Two features with mean 3 and std 2 each.
    let x = t(&[4, 2], &[1., 5., 5., 1., 1., 1., 5., 5.]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.batchnorm(xv, g, b, &[0., 0.], &[1., 1.], true, 1e-6).unwrap();
    let y = tape.value(y);
    for c in 0..2 {
        let col: Vec<f64> = (0..4).map(|r| y.get(&[r, c])).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-6, "std {std}");
    }
    let ev = tape.batchnorm(xv, g, b, &[0., 0.], &[1., 1.], false, 0.0).unwrap();
    assert_eq!(tape.data(ev), x.data());
    let empty = tape.constant(Tensor::zeros(&[0, 2]));
    assert!(matches!(
        tape.batchnorm(empty, g, b, &[0., 0.], &[1., 1.], true, 1e-6),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    let l = tape.sum(x);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1., 1.]);
    assert!(matches!(Tape::new().backward(l), Err(Error::Contract(_))));
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::zeros(&[1]).with_grad());
    store.get_mut(id).grad = Some(vec![1.0]);
    let mut adam = Adam::new(0.005);
    adam.step(&mut store).unwrap();
    assert!((store.get(id).data()[0] + 0.005).abs() < 1e-9);
}

// ---- gradient checks ----------------------------------------------------

#[test]
fn gradcheck_matmul() {
    let worst = sweep(
        |r| vec![rand_tensor(r, &[2, 4, 5], -1., 1.), rand_tensor(r, &[5, 3], -1., 1.)],
        |tp, v| tp.matmul(v[0], v[1]).unwrap(),
    );
    assert!(worst < FD_TOL, "{worst}");
    let worst = sweep(
        |r| vec![rand_tensor(r, &[2, 3, 4], -1., 1.), rand_tensor(r, &[2, 4, 2], -1., 1.)],
        |tp, v| tp.matmul(v[0], v[1]).unwrap(),
    );
    assert!(worst < FD_TOL, "{worst}");
}

#[test]
fn gradcheck_broadcast_binary() {
    for op in 0..3 {
        let worst = sweep(
            |r| vec![rand_tensor(r, &[3, 4], -2., 2.), rand_tensor(r, &[4], -2., 2.)],
            move |tp, v| match op {
                0 => tp.add(v[0], v[1]).unwrap(),
                1 => tp.sub(v[0], v[1]).unwrap(),
                _ => tp.mul(v[0], v[1]).unwrap(),
            },
        );
        assert!(worst < FD_TOL, "op {op}: {worst}");
    }
}

#[test]
fn gradcheck_unary() {
    let smooth = |r: &mut timeformer::rng::Rng| vec![rand_tensor(r, &[3, 5], -2., 2.)];
    let kinked = |r: &mut timeformer::rng::Rng| vec![rand_away_from_zero(r, &[3, 5], 0.05, 2.)];
    assert!(sweep(smooth, |tp, v| tp.scale(v[0], -1.7)) < FD_TOL);
    assert!(sweep(smooth, |tp, v| tp.exp(v[0])) < FD_TOL);
    assert!(sweep(smooth, |tp, v| tp.gelu(v[0])) < FD_TOL);
    assert!(sweep(kinked, |tp, v| tp.relu(v[0])) < FD_TOL);
    assert!(sweep(kinked, |tp, v| tp.abs(v[0])) < FD_TOL);
}

#[test]
fn gradcheck_shape_ops() {
    let x = |r: &mut timeformer::rng::Rng| vec![rand_tensor(r, &[2, 3, 4], -1., 1.)];
    assert!(sweep(x, |tp, v| tp.transpose_last2(v[0]).unwrap()) < FD_TOL);
    assert!(sweep(x, |tp, v| tp.reshape(v[0], &[6, 4]).unwrap()) < FD_TOL);
    assert!(sweep(x, |tp, v| tp.flatten(v[0], 1).unwrap()) < FD_TOL);
    assert!(sweep(x, |tp, v| tp.slice(v[0], 2, 1, 2).unwrap()) < FD_TOL);
    assert!(sweep(x, |tp, v| tp.sum(v[0])) < FD_TOL);
    assert!(sweep(x, |tp, v| tp.mean(v[0]).unwrap()) < FD_TOL);
    let pair = |r: &mut timeformer::rng::Rng| vec![rand_tensor(r, &[2, 3], -1., 1.), rand_tensor(r, &[2, 2], -1., 1.)];
    assert!(sweep(pair, |tp, v| tp.concat(&[v[0], v[1]], 1).unwrap()) < FD_TOL);
}

#[test]
fn gradcheck_softmax() {
    let x = |r: &mut timeformer::rng::Rng| vec![rand_tensor(r, &[3, 5], -3., 3.)];
    assert!(sweep(x, |tp, v| tp.softmax_lastdim(v[0]).unwrap()) < FD_TOL);
    let sq = |r: &mut timeformer::rng::Rng| vec![rand_tensor(r, &[2, 4, 4], -3., 3.)];
    assert!(sweep(sq, |tp, v| tp.softmax_lastdim_masked(v[0], &Mask::causal(4)).unwrap()) < FD_TOL);
}

#[test]
fn gradcheck_pool_and_conv() {
    let x = |r: &mut timeformer::rng::Rng| vec![rand_tensor(r, &[2, 9], -1., 1.)];
    assert!(sweep(x, |tp, v| tp.avg_pool1d(v[0], 2, 2).unwrap()) < FD_TOL);
    assert!(sweep(x, |tp, v| tp.avg_pool1d(v[0], 3, 1).unwrap()) < FD_TOL);
    let conv = |r: &mut timeformer::rng::Rng| {
        vec![
            rand_tensor(r, &[2, 7, 2], -1., 1.),
            rand_tensor(r, &[3, 2, 3], -1., 1.),
            rand_tensor(r, &[3], -1., 1.),
        ]
    };
    assert!(sweep(conv, |tp, v| tp.conv1d(v[0], v[1], v[2]).unwrap()) < FD_TOL);
}

#[test]
fn gradcheck_batchnorm() {
    let inputs = |r: &mut timeformer::rng::Rng| {
        vec![
            rand_tensor(r, &[3, 4, 3], -2., 2.),
            rand_tensor(r, &[3], 0.5, 1.5),
            rand_tensor(r, &[3], -1., 1.),
        ]
    };
    for training in [true, false] {
        let worst = sweep(inputs, move |tp, v| {
            tp.batchnorm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 1.0], training, 1e-6)
                .unwrap()
        });
        assert!(worst < FD_TOL, "training={training}: {worst}");
    }
}

// ---- invariants -----------------------------------------------------------

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = data.len().div_ceil(cols);
        let mut padded = data.clone();
        padded.resize(rows * cols, 0.0);
        let y = eval(&[Tensor::new(&[rows, cols], padded).unwrap()], |tp, v| tp.softmax_lastdim(v[0]).unwrap());
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn add_commutes_under_broadcast(a in prop::collection::vec(-10.0f64..10.0, 6), b in prop::collection::vec(-10.0f64..10.0, 3)) {
        let (a, b) = (t(&[2, 3], &a), t(&[3], &b));
        let ab = eval(&[a.clone(), b.clone()], |tp, v| tp.add(v[0], v[1]).unwrap());
        let ba = eval(&[b, a], |tp, v| tp.add(v[0], v[1]).unwrap());
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn transpose_twice_is_identity(data in prop::collection::vec(-10.0f64..10.0, 12)) {
        let x = t(&[3, 4], &data);
        let y = eval(&[x.clone()], |tp, v| { let a = tp.transpose_last2(v[0]).unwrap(); tp.transpose_last2(a).unwrap() });
        prop_assert_eq!(y.data(), x.data());
    }
}
