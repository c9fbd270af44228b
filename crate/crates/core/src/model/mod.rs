//! Multi-scale patch forecaster and its building blocks.

mod checkpoint;
mod config;
mod layers;
mod patch;
mod timeformer;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use config::{Activation, ModelConfig, Variant};
pub use layers::{ConvEmbedding, FeedForward, Linear};
pub use patch::{ceil_sqrt, segment, PatchGeometry, PatchSet};
pub use timeformer::{Stage, TimeFormer};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Tape, Var};

/// Average-pools `x: [B, L_h]` at scales `1..=num_scales`; scale 1 is `x` itself.
pub fn multi_scale_sample(tape: &mut Tape, x: Var, num_scales: usize) -> Result<Vec<Var>> {
    if num_scales < 1 {
        return Err(config_err!("number of scales must be >= 1"));
    }
    let len = *tape.shape(x).last().ok_or_else(|| dim_err!("cannot sample a scalar"))?;
    if len < num_scales {
        return Err(config_err!("look-back {} is shorter than {} scales", len, num_scales));
    }
    (1..=num_scales)
        .map(|s| if s == 1 { Ok(x) } else { tape.avg_pool1d(x, s, s) })
        .collect()
}
