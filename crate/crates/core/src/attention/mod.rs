//! Self-attention with an exponential-decay modulation term and a causal mask.
//!
//! For tokens `i` (query) and `j` (key) the block computes
//!
//! ```text
//! A[i][j]  = softmax_j(q_i · k_j / sqrt(d))
//! Â[i][j]  = A[i][j] · Ω[i][j],      Ω[i][j] = μ + ε·exp(-γ·|i - j|)
//! Ã[i][j]  = Â[i][j] if j <= i else 0
//! out[i]   = Σ_j Ã[i][j] · v_j
//! ```
//!
//! with `μ = 0, ε = 1` unless overridden. Positions are integer token indices.
//! When the block is causal, the softmax normalizer only runs over the
//! visible keys `j <= i` by default (see [`NormalizerScope`]).

mod block;

pub use block::{AttentionMatrix, MoSABlock, MoSAState};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Mask, Tape, Tensor, Var};

/// Which keys enter the softmax denominator of a causal block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerScope {
    /// Only keys `j <= i`. Rows never depend on later positions.
    #[default]
    Visible,
    /// All keys; the mask is applied after normalization. Later keys still
    /// shift earlier rows through the shared denominator.
    Full,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MoSAConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    /// Feature width of the block input; an input projection is added when it
    /// differs from `model_dim`.
    pub input_dim: usize,
    pub gamma: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub causal: bool,
    pub hawkes: bool,
    pub renormalize_rows: bool,
    pub normalizer: NormalizerScope,
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl MoSAConfig {
    /// Modulated, causal attention.
    pub fn mosa(model_dim: usize, num_heads: usize, gamma: f64) -> Self {
        Self {
            model_dim,
            num_heads,
            input_dim: model_dim,
            gamma,
            mu: 0.0,
            epsilon: 1.0,
            causal: true,
            hawkes: true,
            renormalize_rows: false,
            normalizer: NormalizerScope::Visible,
            norm_eps: 1e-6,
            norm_momentum: 0.1,
        }
    }

    /// Plain bidirectional softmax attention.
    pub fn standard(model_dim: usize, num_heads: usize) -> Self {
        Self {
            causal: false,
            hawkes: false,
            ..Self::mosa(model_dim, num_heads, 0.0)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.input_dim == 0 {
            return Err(config_err!("model_dim, num_heads and input_dim must be >= 1"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(config_err!(
                "num_heads {} does not divide model_dim {}",
                self.num_heads,
                self.model_dim
            ));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(config_err!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if self.renormalize_rows && self.hawkes && self.mu <= 0.0 && self.epsilon <= 0.0 {
            return Err(config_err!("row renormalization needs a positive modulation"));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count of one block.
    pub fn num_params(&self) -> usize {
        let d = self.model_dim;
        let input = if self.input_dim != d { self.input_dim * d } else { 0 };
        input + 3 * d * d + d * d + 2 * d
    }
}

/// `Ω[i][j] = exp(-γ·|i - j|)` for a sequence of `len` tokens.
pub fn hawkes_modulation(len: usize, gamma: f64) -> Result<Tensor> {
    hawkes_modulation_with(len, gamma, 0.0, 1.0)
}

/// `Ω[i][j] = μ + ε·exp(-γ·|i - j|)`.
pub fn hawkes_modulation_with(len: usize, gamma: f64, mu: f64, epsilon: f64) -> Result<Tensor> {
    if len == 0 {
        return Err(dim_err!("modulation needs at least one token"));
    }
    if !(gamma >= 0.0) {
        return Err(config_err!("gamma must be >= 0, got {}", gamma));
    }
    let decay: Vec<f64> = (0..len).map(|gap| mu + epsilon * (-gamma * gap as f64).exp()).collect();
    let mut data = Vec::with_capacity(len * len);
    for i in 0..len {
        data.extend(decay[1..=i].iter().rev());
        data.extend(&decay[..len - i]);
    }
    Tensor::new(&[len, len], data)
}

/// Query, key and value projections of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadProjection {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Scaled dot-product attention weights `softmax(Q Kᵀ / sqrt(d))` over the last axis.
///
/// `visible`, if given, restricts the softmax to kept keys; dropped entries are exact zeros.
pub fn raw_attention(tape: &mut Tape, query: Var, key: Var, visible: Option<&Mask>) -> Result<Var> {
    let scores = scaled_scores(tape, query, key)?;
    match visible {
        Some(mask) => tape.softmax_lastdim_masked(scores, mask),
        None => tape.softmax_lastdim(scores),
    }
}

pub(crate) fn scaled_scores(tape: &mut Tape, query: Var, key: Var) -> Result<Var> {
    let qs = tape.shape(query).to_vec();
    let ks = tape.shape(key).to_vec();
    if qs.len() < 2 || qs != ks {
        return Err(dim_err!("query {:?} and key {:?} must share shape [.., T, d]", qs, ks));
    }
    let t = qs[qs.len() - 2];
    let d = qs[qs.len() - 1];
    if t == 0 {
        return Err(dim_err!("attention over zero tokens"));
    }
    let kt = tape.transpose_last2(key)?;
    let scores = tape.matmul(query, kt)?;
    Ok(tape.scale(scores, 1.0 / (d as f64).sqrt()))
}

/// `Ã = A ⊙ Ω`, with entries above the diagonal set to exactly zero when `causal`.
///
/// There is no renormalization afterwards.
pub fn apply_modulation_and_mask(
    tape: &mut Tape,
    attention: Var,
    modulation: &Tensor,
    causal: bool,
) -> Result<Var> {
    let s = tape.shape(attention).to_vec();
    if s.len() < 2 || !s.ends_with(modulation.shape()) || modulation.rank() < 2 {
        return Err(dim_err!(
            "modulation {:?} does not match attention {:?}",
            modulation.shape(),
            s
        ));
    }
    let weight = if causal {
        causal_weight(modulation)
    } else {
        modulation.clone()
    };
    let w = tape.constant(weight);
    tape.mul(attention, w)
}

/// Zeroes every entry above the diagonal of each trailing `[T, T]` block.
pub(crate) fn causal_weight(modulation: &Tensor) -> Tensor {
    let t = modulation.shape()[modulation.rank() - 1];
    let mut w = modulation.clone();
    for block in w.data_mut().chunks_mut(t * t) {
        for (i, row) in block.chunks_mut(t).enumerate() {
            row[i + 1..].fill(0.0);
        }
    }
    w
}

/// `out[t] = Σ_τ Ã[t][τ]·v_τ`.
pub fn aggregate(tape: &mut Tape, attention: Var, value: Var) -> Result<Var> {
    let a = tape.shape(attention).to_vec();
    let v = tape.shape(value).to_vec();
    if a.len() < 2 || v.len() < 2 || a[a.len() - 1] != a[a.len() - 2] || a[a.len() - 1] != v[v.len() - 2] {
        return Err(dim_err!("cannot aggregate attention {:?} over values {:?}", a, v));
    }
    tape.matmul(attention, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gamma_modulation_is_ones() {
        let omega = hawkes_modulation(5, 0.0).unwrap();
        assert!(omega.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn modulation_value_and_diagonal() {
        let omega = hawkes_modulation(4, 0.1).unwrap();
        assert!((omega.get(&[3, 1]) - (-0.2f64).exp()).abs() < 1e-15);
        assert!((omega.get(&[3, 1]) - 0.818_730_753_077_981_9).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(omega.get(&[i, i]), 1.0);
        }
    }

    #[test]
    fn negative_gamma_rejected() {
        assert!(matches!(
            hawkes_modulation(3, -0.1),
            Err(crate::Error::Config(_))
        ));
        assert!(hawkes_modulation(0, 0.1).is_err());
    }

    #[test]
    fn heads_must_divide_model_dim() {
        assert!(MoSAConfig::mosa(10, 3, 0.1).validate().is_err());
        assert!(MoSAConfig::mosa(12, 3, 0.1).validate().is_ok());
        assert!(MoSAConfig::mosa(12, 3, -1.0).validate().is_err());
    }

    #[test]
    fn uniform_attention_with_mask() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 2], 0.5));
        let omega = hawkes_modulation(2, 0.0).unwrap();
        let out = apply_modulation_and_mask(&mut tape, a, &omega, true).unwrap();
        assert_eq!(tape.data(out), &[0.5, 0.0, 0.5, 0.5]);

        let out = apply_modulation_and_mask(&mut tape, a, &omega, false).unwrap();
        assert_eq!(tape.data(out), tape.data(a));
    }

    #[test]
    fn older_entry_halved_with_ln2() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 2], 0.5));
        let omega = hawkes_modulation(2, std::f64::consts::LN_2).unwrap();
        let out = apply_modulation_and_mask(&mut tape, a, &omega, true).unwrap();
        let row1 = &tape.data(out)[2..];
        assert!((row1[0] - 0.25).abs() < 1e-15);
        assert_eq!(row1[1], 0.5);
    }

    #[test]
    fn raw_attention_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let a = raw_attention(&mut tape, z, z, None).unwrap();
        for v in tape.data(a) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let one = tape.constant(Tensor::new(&[1, 2], vec![0.3, -1.2]).unwrap());
        let a = raw_attention(&mut tape, one, one, None).unwrap();
        assert_eq!(tape.data(a), &[1.0]);

        // d = 1: q0·k0 = 1, q0·k1 = 0.
        let q = tape.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
        let a = raw_attention(&mut tape, q, k, None).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.data(a)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((tape.data(a)[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((tape.data(a)[0] - 0.7311).abs() < 1e-4);

        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(raw_attention(&mut tape, empty, empty, None).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let eye = tape.constant(eye);
        let out = aggregate(&mut tape, eye, v).unwrap();
        assert_eq!(tape.data(out), tape.data(v));

        let mut a = Tensor::full(&[3, 3], 0.2);
        a.data_mut()[3..6].iter_mut().for_each(|x| *x = 0.0);
        let a = tape.constant(a);
        let out = aggregate(&mut tape, a, v).unwrap();
        assert_eq!(&tape.data(out)[2..4], &[0.0, 0.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(aggregate(&mut tape, bad, v).is_err());
    }
}
