use super::config::{ModelConfig, Variant};
use super::layers::{ConvEmbedding, FeedForward, Linear};
use super::patch::{segment, PatchGeometry};
use crate::attention::{AttentionMatrix, MoSABlock};
use crate::error::{config_err, dim_err, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::{Mask, ParamStore, Tape, Tensor, Var};

/// Which attention stack a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Time steps inside one patch are tokens.
    Intra,
    /// Whole patches are tokens.
    Inter,
    /// Every time step of the (sampled) sequence is a token.
    Flat,
}

impl std::str::FromStr for Stage {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(Stage::Intra),
            "inter" => Ok(Stage::Inter),
            "flat" => Ok(Stage::Flat),
            other => Err(crate::error::config_err!("unknown stage '{}'", other)),
        }
    }
}

#[derive(Debug, Clone)]
enum StageBody {
    Patched {
        geometry: PatchGeometry,
        pad_mask: Option<Mask>,
        intra: Vec<MoSABlock>,
        fnn: FeedForward,
        inter: Vec<MoSABlock>,
        ffn: FeedForward,
    },
    Flat {
        blocks: Vec<MoSABlock>,
        ffn: FeedForward,
    },
}

/// Per-scale path: embedding plus attention stacks, reducing `[B, L_s]` to `[B, D]`.
#[derive(Debug, Clone)]
struct ScalePath {
    scale: usize,
    embed: ConvEmbedding,
    body: StageBody,
}

#[derive(Debug, Clone)]
enum Arch {
    MultiScale {
        paths: Vec<ScalePath>,
        head: Linear,
    },
    Vanilla {
        embed: ConvEmbedding,
        positional: Tensor,
        blocks: Vec<MoSABlock>,
        head: Linear,
    },
}

/// Channel-independent forecaster mapping `[L_h]` histories to `[L_f]` forecasts.
#[derive(Debug, Clone)]
pub struct TimeFormer {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    arch: Arch,
}

impl TimeFormer {
    /// Builds the variant named in `config`, initializing weights from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let arch = match config.variant {
            Variant::Full | Variant::StandardAttention | Variant::NoSegmentation => {
                let paths = (1..=config.num_scales)
                    .map(|s| ScalePath::new(&config, s, &mut store, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let head = Linear::new(
                    &mut store,
                    &mut rng,
                    "head",
                    config.num_scales * config.d_model,
                    config.horizon,
                );
                Arch::MultiScale { paths, head }
            }
            Variant::VanillaTransformer | Variant::VanillaTransformerMosa => {
                let embed = ConvEmbedding::new(&mut store, &mut rng, "embed", config.conv_kernel, config.d_model);
                let blocks = (0..config.depth)
                    .map(|l| MoSABlock::new(&mut store, &mut rng, &format!("encoder{l}"), config.attention(true)))
                    .collect::<Result<Vec<_>>>()?;
                let head = Linear::new(
                    &mut store,
                    &mut rng,
                    "head",
                    config.lookback * config.d_model,
                    config.horizon,
                );
                Arch::Vanilla {
                    embed,
                    positional: sinusoidal_positions(config.lookback, config.d_model),
                    blocks,
                    head,
                }
            }
        };
        Ok(Self {
            config,
            seed,
            store,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Number of per-scale parameter groups.
    pub fn num_scale_paths(&self) -> usize {
        match &self.arch {
            Arch::MultiScale { paths, .. } => paths.len(),
            Arch::Vanilla { .. } => 1,
        }
    }

    /// Forecasts `x: [B, L_h]` (one univariate history per row) as `[B, L_f]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.lookback || s[0] == 0 {
            return Err(dim_err!(
                "model expects [B >= 1, {}] input, got {:?}",
                self.config.lookback,
                s
            ));
        }
        match &self.arch {
            Arch::MultiScale { paths, head } => {
                let mut reps = Vec::with_capacity(paths.len());
                for path in paths {
                    let sampled = if path.scale == 1 {
                        x
                    } else {
                        tape.avg_pool1d(x, path.scale, path.scale)?
                    };
                    reps.push(path.forward(tape, &self.store, sampled, training)?);
                }
                let z = if reps.len() == 1 { reps[0] } else { tape.concat(&reps, 1)? };
                head.forward(tape, &self.store, z)
            }
            Arch::Vanilla {
                embed,
                positional,
                blocks,
                head,
            } => {
                let mut h = embed.forward(tape, &self.store, x)?;
                let pe = tape.constant(positional.clone());
                h = tape.add(h, pe)?;
                for block in blocks {
                    h = block.forward(tape, &self.store, h, training, None)?;
                }
                let flat = tape.flatten(h, 1)?;
                head.forward(tape, &self.store, flat)
            }
        }
    }

    /// Runs the scale path at position `index` on an already sampled series `[B, L_s]`.
    pub fn scale_representation(&self, tape: &mut Tape, index: usize, sampled: Var, training: bool) -> Result<Var> {
        match &self.arch {
            Arch::MultiScale { paths, .. } => paths
                .get(index)
                .ok_or_else(|| dim_err!("scale index {} out of range", index))?
                .forward(tape, &self.store, sampled, training),
            Arch::Vanilla { .. } => Err(dim_err!("vanilla encoders have no scale paths")),
        }
    }

    /// Applies the projection head to concatenated scale representations `[B, S·D]`.
    pub fn project(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match &self.arch {
            Arch::MultiScale { head, .. } | Arch::Vanilla { head, .. } => head.forward(tape, &self.store, z),
        }
    }

    /// Forecast of a multivariate history `[L_h, N]` as `[L_f, N]`, in eval mode.
    ///
    /// Every channel runs through the same univariate model.
    pub fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || s[0] != self.config.lookback || s[1] == 0 {
            return Err(dim_err!(
                "forecast expects [{}, N >= 1], got {:?}",
                self.config.lookback,
                s
            ));
        }
        let n = s[1];
        let rows = transpose(x.data(), s[0], n);
        let batch = Tensor::new(&[n, s[0]], rows)?;
        let out = self.predict(&batch)?;
        Tensor::new(&[self.config.horizon, n], transpose(out.data(), n, self.config.horizon))
    }

    /// Eval-mode forward over rows of `[B, L_h]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut tape, x, false)?;
        Ok(tape.value(y))
    }

    /// Attention block by stage, 1-based scale and layer.
    pub fn block(&self, stage: Stage, scale: usize, layer: usize) -> Option<&MoSABlock> {
        match (&self.arch, stage) {
            (Arch::MultiScale { paths, .. }, _) => {
                let path = paths.iter().find(|p| p.scale == scale)?;
                match (&path.body, stage) {
                    (StageBody::Patched { intra, .. }, Stage::Intra) => intra.get(layer),
                    (StageBody::Patched { inter, .. }, Stage::Inter) => inter.get(layer),
                    (StageBody::Flat { blocks, .. }, Stage::Flat) => blocks.get(layer),
                    _ => None,
                }
            }
            (Arch::Vanilla { blocks, .. }, Stage::Flat) if scale == 1 => blocks.get(layer),
            _ => None,
        }
    }

    /// Every attention block, in construction order.
    pub fn blocks(&self) -> Vec<&MoSABlock> {
        match &self.arch {
            Arch::MultiScale { paths, .. } => paths
                .iter()
                .flat_map(|p| match &p.body {
                    StageBody::Patched { intra, inter, .. } => intra.iter().chain(inter.iter()).collect::<Vec<_>>(),
                    StageBody::Flat { blocks, .. } => blocks.iter().collect(),
                })
                .collect(),
            Arch::Vanilla { blocks, .. } => blocks.iter().collect(),
        }
    }

    /// Patch geometry of the scale-`scale` path, if it is segmented.
    pub fn geometry(&self, scale: usize) -> Option<PatchGeometry> {
        match &self.arch {
            Arch::MultiScale { paths, .. } => paths.iter().find(|p| p.scale == scale).and_then(|p| match &p.body {
                StageBody::Patched { geometry, .. } => Some(*geometry),
                StageBody::Flat { .. } => None,
            }),
            Arch::Vanilla { .. } => None,
        }
    }

    /// Eval-mode attention weights of one block for a single univariate history.
    ///
    /// Returns one entry per attended sequence (each patch for intra-patch
    /// blocks, the whole sequence otherwise), each holding every head.
    pub fn attention_maps(
        &self,
        history: &[f64],
        stage: Stage,
        scale: usize,
        layer: usize,
    ) -> Result<Vec<Vec<AttentionMatrix>>> {
        let block = self
            .block(stage, scale, layer)
            .ok_or_else(|| config_err!("model has no {:?} block at scale {} layer {}", stage, scale, layer))?;
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::new(&[1, history.len()], history.to_vec())?);
        self.forward(&mut tape, x, false)?;
        let sequences = match stage {
            Stage::Intra => self.geometry(scale).map_or(1, |g| g.patches),
            Stage::Inter | Stage::Flat => 1,
        };
        (0..sequences)
            .map(|i| {
                block
                    .attention_matrices(&tape, i)
                    .ok_or_else(|| dim_err!("no attention captured for sequence {}", i))
            })
            .collect()
    }

    pub(crate) fn from_parts(config: ModelConfig, seed: u64, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        model.store.copy_values_from(&store)?;
        Ok(model)
    }
}

impl ScalePath {
    fn new(config: &ModelConfig, scale: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let d = config.d_model;
        let len = config.scale_len(scale);
        let prefix = format!("scale{scale}");
        let embed = ConvEmbedding::new(store, rng, &format!("{prefix}.embed"), config.conv_kernel, d);
        let body = match config.variant {
            Variant::NoSegmentation => {
                let blocks = (0..config.depth)
                    .map(|l| MoSABlock::new(store, rng, &format!("{prefix}.flat{l}"), config.attention(true)))
                    .collect::<Result<Vec<_>>>()?;
                let ffn = FeedForward::new(store, rng, &format!("{prefix}.ffn"), len * d, config.ffn_hidden, d, config.activation);
                StageBody::Flat { blocks, ffn }
            }
            _ => {
                let geometry = PatchGeometry::new(len);
                let intra = (0..config.depth)
                    .map(|l| MoSABlock::new(store, rng, &format!("{prefix}.intra{l}"), config.attention(true)))
                    .collect::<Result<Vec<_>>>()?;
                let fnn = FeedForward::new(
                    store,
                    rng,
                    &format!("{prefix}.fnn"),
                    geometry.patch_len * d,
                    config.ffn_hidden,
                    d,
                    config.activation,
                );
                let inter = (0..config.depth)
                    .map(|l| MoSABlock::new(store, rng, &format!("{prefix}.inter{l}"), config.attention(true)))
                    .collect::<Result<Vec<_>>>()?;
                let ffn = FeedForward::new(
                    store,
                    rng,
                    &format!("{prefix}.ffn"),
                    geometry.patches * d,
                    config.ffn_hidden,
                    d,
                    config.activation,
                );
                let pad_mask = (config.mask_padding && geometry.pad_len > 0).then(|| geometry.padding_mask());
                StageBody::Patched {
                    geometry,
                    pad_mask,
                    intra,
                    fnn,
                    inter,
                    ffn,
                }
            }
        };
        Ok(Self { scale, embed, body })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let b = tape.shape(x)[0];
        let embedded = self.embed.forward(tape, store, x)?;
        match &self.body {
            StageBody::Flat { blocks, ffn } => {
                let mut h = embedded;
                for block in blocks {
                    h = block.forward(tape, store, h, training, None)?;
                }
                let flat = tape.flatten(h, 1)?;
                ffn.forward(tape, store, flat)
            }
            StageBody::Patched {
                geometry,
                pad_mask,
                intra,
                fnn,
                inter,
                ffn,
            } => {
                let mut h = segment(tape, embedded)?.patches;
                for block in intra {
                    h = block.forward(tape, store, h, training, pad_mask.as_ref())?;
                }
                // [B, P, K, D] -> [B, P, K·D] -> [B, P, D]
                let flat = tape.flatten(h, 2)?;
                let mut tokens = fnn.forward(tape, store, flat)?;
                debug_assert_eq!(tape.shape(tokens), &[b, geometry.patches, inter[0].config().model_dim]);
                for block in inter {
                    tokens = block.forward(tape, store, tokens, training, None)?;
                }
                let flat = tape.flatten(tokens, 1)?;
                ffn.forward(tape, store, flat)
            }
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], data).expect("positional table shape")
}
