use super::config::Activation;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[input, output], input, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Two-layer perceptron with one hidden layer.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), input, hidden),
            output: Linear::new(store, rng, &format!("{name}.output"), hidden, output),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Gelu => tape.gelu(h),
        };
        self.output.forward(tape, store, h)
    }
}

/// Same-length 1-D convolution from one channel to `d_model` channels.
#[derive(Debug, Clone)]
pub struct ConvEmbedding {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, kernel: usize, d_model: usize) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[kernel, 1, d_model], kernel, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[d_model]),
        }
    }

    /// `[B, L] -> [B, L, d_model]`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut shape = tape.shape(x).to_vec();
        shape.push(1);
        let x = tape.reshape(x, &shape)?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv1d(x, w, b)
    }
}
