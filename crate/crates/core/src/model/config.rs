use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::patch::PatchGeometry;
use crate::attention::{MoSAConfig, NormalizerScope};
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Multi-scale, segmented, modulated causal attention.
    Full,
    /// One attention pass over the whole embedded sequence per scale.
    NoSegmentation,
    /// Full topology with plain bidirectional attention.
    StandardAttention,
    /// Per-time-step-token encoder with plain attention.
    VanillaTransformer,
    /// Per-time-step-token encoder with modulated causal attention.
    VanillaTransformerMosa,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSegmentation,
        Variant::StandardAttention,
        Variant::VanillaTransformer,
        Variant::VanillaTransformerMosa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSegmentation => "no_segmentation",
            Variant::StandardAttention => "standard_attention",
            Variant::VanillaTransformer => "vanilla_transformer",
            Variant::VanillaTransformerMosa => "vanilla_transformer_mosa",
        }
    }

    pub fn uses_mosa(self) -> bool {
        !matches!(self, Variant::StandardAttention | Variant::VanillaTransformer)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "timeformer" => Ok(Variant::Full),
            "no_segmentation" | "wo_ss" | "w/o_ss" => Ok(Variant::NoSegmentation),
            "standard_attention" | "wo_mosa" | "w/o_mosa" => Ok(Variant::StandardAttention),
            "vanilla_transformer" | "transformer" => Ok(Variant::VanillaTransformer),
            "vanilla_transformer_mosa" | "transformer_mosa" => Ok(Variant::VanillaTransformerMosa),
            other => Err(config_err!("unknown model variant '{}'", other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(config_err!("unknown activation '{}'", other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub num_scales: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub gamma: f64,
    pub conv_kernel: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    pub activation: Activation,
    /// Attention blocks per stage.
    pub depth: usize,
    /// Exclude zero-padding keys from intra-patch attention.
    pub mask_padding: bool,
    pub renormalize_rows: bool,
    pub normalizer: NormalizerScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            num_scales: 1,
            d_model: 64,
            num_heads: 4,
            gamma: 0.1,
            conv_kernel: 3,
            ffn_hidden: 128,
            variant: Variant::Full,
            activation: Activation::Relu,
            depth: 1,
            mask_padding: false,
            renormalize_rows: false,
            normalizer: NormalizerScope::Visible,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 {
            return Err(config_err!("num_scales must be >= 1"));
        }
        if self.lookback < self.num_scales {
            return Err(config_err!(
                "lookback {} is shorter than the number of scales {}",
                self.lookback,
                self.num_scales
            ));
        }
        if self.horizon == 0 || self.depth == 0 || self.ffn_hidden == 0 {
            return Err(config_err!("horizon, depth and ffn_hidden must be >= 1"));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(config_err!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        self.attention(true).validate()
    }

    /// Block configuration for this variant. `modulated` is false for the
    /// plain-attention variants regardless of the argument.
    pub fn attention(&self, modulated: bool) -> MoSAConfig {
        let mut cfg = if modulated && self.variant.uses_mosa() {
            MoSAConfig::mosa(self.d_model, self.num_heads, self.gamma)
        } else {
            MoSAConfig::standard(self.d_model, self.num_heads)
        };
        cfg.renormalize_rows = self.renormalize_rows;
        cfg.normalizer = self.normalizer;
        cfg
    }

    /// Sampled length at scale `s` (1-based): pooling with kernel = stride = s.
    pub fn scale_len(&self, s: usize) -> usize {
        self.lookback / s
    }

    /// Closed-form trainable parameter count.
    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let h = self.ffn_hidden;
        let block = self.attention(true).num_params() * self.depth;
        let conv = self.conv_kernel * d + d;
        let ff = |input: usize| input * h + h + h * d + d;
        match self.variant {
            Variant::Full | Variant::StandardAttention => {
                let per_scale: usize = (1..=self.num_scales)
                    .map(|s| {
                        let g = PatchGeometry::new(self.scale_len(s));
                        conv + 2 * block + ff(g.patch_len * d) + ff(g.patches * d)
                    })
                    .sum();
                per_scale + self.num_scales * d * self.horizon + self.horizon
            }
            Variant::NoSegmentation => {
                let per_scale: usize = (1..=self.num_scales)
                    .map(|s| conv + block + ff(self.scale_len(s) * d))
                    .sum();
                per_scale + self.num_scales * d * self.horizon + self.horizon
            }
            Variant::VanillaTransformer | Variant::VanillaTransformerMosa => {
                conv + block + self.lookback * d * self.horizon + self.horizon
            }
        }
    }
}
