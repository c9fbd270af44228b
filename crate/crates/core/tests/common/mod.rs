//! Helpers shared by the integration tests: random tensors, a finite-difference
//! harness and a loop-based reference attention block.

#![allow(dead_code)]

use rand::Rng as _;
use timeformer::attention::MoSABlock;
use timeformer::rng::{seeded, Rng};
use timeformer::tensor::gradcheck::{max_relative_error, numeric_gradient};
use timeformer::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> Rng {
    seeded(seed)
}

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with magnitude in `[gap, hi)` and random sign, for kinked functions.
pub fn rand_away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Worst relative error between tape gradients and central differences of
/// `Σ wᵢ·yᵢ` (random weights `w`) over every input of `build`.
pub fn grad_check(seed: u64, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let y = build(&mut tape, &vars);
    let mut r = rng(seed ^ 0xabcdef);
    let weights: Vec<f64> = (0..tape.data(y).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(tape.shape(y), weights.clone()).unwrap());
    let prod = tape.mul(y, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).unwrap().to_vec();
        let numeric = numeric_gradient(x, FD_STEP, |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| t.constant(if j == i { probe.clone() } else { inp.clone() }))
                .collect();
            let y = build(&mut t, &vs);
            weighted_sum(t.data(y), &weights)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Same harness for a loss depending on stored parameters as well as an input.
pub fn grad_check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    x: &Tensor,
    loss: impl Fn(&mut Tape, &ParamStore, Var) -> Var,
) -> f64 {
    store.zero_grads();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let l = loss(&mut tape, store, xv);
    tape.backward(l).unwrap();
    tape.accumulate_param_grads(store).unwrap();

    let value_at = |store: &ParamStore, x: &Tensor| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let l = loss(&mut t, store, xv);
        t.data(l)[0]
    };
    let mut worst = max_relative_error(
        tape.grad(xv).unwrap(),
        &numeric_gradient(x, FD_STEP, |p| value_at(store, p)),
    );
    for &id in ids {
        let analytic = store.get(id).grad.clone().unwrap();
        let base = store.get(id).clone();
        let numeric = numeric_gradient(&base, FD_STEP, |p| {
            let mut probe = store.clone();
            probe.get_mut(id).data_mut().copy_from_slice(p.data());
            value_at(&probe, x)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

pub type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Row softmax over the first `visible[i]` entries of each row; the rest are 0.
pub fn softmax_rows(scores: &Mat, visible: impl Fn(usize) -> usize) -> Mat {
    scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n = visible(i);
            let max = row[..n].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row[..n].iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; row.len()];
            for j in 0..n {
                out[j] = e[j] / z;
            }
            out
        })
        .collect()
}

/// Reference multi-head attention block written with plain loops, reading its
/// weights out of a [`MoSABlock`]'s parameter store.
pub struct OracleBlock {
    pub w_in: Option<Mat>,
    pub heads: Vec<(Mat, Mat, Mat)>,
    pub w_o: Mat,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl OracleBlock {
    pub fn from_block(block: &MoSABlock, store: &ParamStore) -> Self {
        let s = block.state();
        Self {
            w_in: s.input_proj.map(|id| mat(store.get(id))),
            heads: s
                .heads
                .iter()
                .map(|h| (mat(store.get(h.w_q)), mat(store.get(h.w_k)), mat(store.get(h.w_v))))
                .collect(),
            w_o: mat(store.get(s.w_o)),
            scale: store.get(s.norm_scale).data().to_vec(),
            shift: store.get(s.norm_shift).data().to_vec(),
            running_mean: store.get(s.running_mean).data().to_vec(),
            running_var: store.get(s.running_var).data().to_vec(),
            eps: block.config().norm_eps,
        }
    }

    /// Attention weights of every head for one sequence `[T, F]`, softmax over
    /// all keys (`causal = false`) or keys `j <= i`.
    pub fn attention(&self, x: &Mat, causal: bool) -> Vec<Mat> {
        let x = match &self.w_in {
            Some(w) => matmul(x, w),
            None => x.clone(),
        };
        let t = x.len();
        self.heads
            .iter()
            .map(|(wq, wk, _)| {
                let q = matmul(&x, wq);
                let k = matmul(&x, wk);
                let d = q[0].len() as f64;
                let scores: Mat = (0..t)
                    .map(|i| {
                        (0..t)
                            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                            .collect()
                    })
                    .collect();
                softmax_rows(&scores, |i| if causal { i + 1 } else { t })
            })
            .collect()
    }

    /// Full block output for a batch of sequences `[B][T][F]`.
    pub fn forward(&self, xs: &[Mat], training: bool) -> Vec<Mat> {
        let pre: Vec<Mat> = xs
            .iter()
            .map(|x| {
                let lifted = match &self.w_in {
                    Some(w) => matmul(x, w),
                    None => x.clone(),
                };
                let maps = self.attention(x, false);
                let mut concat: Mat = vec![Vec::new(); x.len()];
                for ((_, _, wv), a) in self.heads.iter().zip(&maps) {
                    let v = matmul(&lifted, wv);
                    for (row, out) in matmul(a, &v).into_iter().zip(concat.iter_mut()) {
                        out.extend(row);
                    }
                }
                let proj = matmul(&concat, &self.w_o);
                lifted
                    .iter()
                    .zip(&proj)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                    .collect()
            })
            .collect();

        let d = self.scale.len();
        let (mean, var) = if training {
            let n = (pre.len() * pre[0].len()) as f64;
            let mut mean = vec![0.0; d];
            for row in pre.iter().flatten() {
                for c in 0..d {
                    mean[c] += row[c] / n;
                }
            }
            let mut var = vec![0.0; d];
            for row in pre.iter().flatten() {
                for c in 0..d {
                    var[c] += (row[c] - mean[c]).powi(2) / n;
                }
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        pre.iter()
            .map(|seq| {
                seq.iter()
                    .map(|row| {
                        (0..d)
                            .map(|c| self.scale[c] * (row[c] - mean[c]) / (var[c] + self.eps).sqrt() + self.shift[c])
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn to_mats(t: &Tensor) -> Vec<Mat> {
    let s = t.shape();
    let (tt, f) = (s[s.len() - 2], s[s.len() - 1]);
    t.data()
        .chunks(tt * f)
        .map(|seq| seq.chunks(f).map(<[f64]>::to_vec).collect())
        .collect()
}
