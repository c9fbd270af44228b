use super::{causal_weight, hawkes_modulation_with, scaled_scores, HeadProjection, MoSAConfig, NormalizerScope};
use crate::error::{dim_err, Result};
use crate::rng::Rng;
use crate::tensor::{Mask, ParamId, ParamStore, StatUpdate, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Learnable state of one attention block.
#[derive(Debug, Clone)]
pub struct MoSAState {
    pub input_proj: Option<ParamId>,
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Multi-head attention, output projection, residual and batch norm.
#[derive(Debug, Clone)]
pub struct MoSABlock {
    name: String,
    config: MoSAConfig,
    state: MoSAState,
}

/// One head's post-mask attention weights for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub head: usize,
    pub size: usize,
    /// Row-major `[size, size]`.
    pub values: Vec<f64>,
}

impl AttentionMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }

    pub fn token_positions(&self) -> std::ops::Range<usize> {
        0..self.size
    }

    pub fn upper_triangle_is_zero(&self) -> bool {
        (0..self.size).all(|i| self.row(i)[i + 1..].iter().all(|&v| v == 0.0))
    }

    pub fn row_mass(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }
}

impl MoSABlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, config: MoSAConfig) -> Result<Self> {
        config.validate()?;
        let d_model = config.model_dim;
        let d = config.head_dim();
        let input_proj = (config.input_dim != d_model).then(|| {
            store.add_uniform(
                format!("{name}.w_in"),
                &[config.input_dim, d_model],
                config.input_dim,
                rng,
            )
        });
        let heads = (0..config.num_heads)
            .map(|h| HeadParams {
                w_q: store.add_uniform(format!("{name}.head{h}.w_q"), &[d_model, d], d_model, rng),
                w_k: store.add_uniform(format!("{name}.head{h}.w_k"), &[d_model, d], d_model, rng),
                w_v: store.add_uniform(format!("{name}.head{h}.w_v"), &[d_model, d], d_model, rng),
            })
            .collect();
        let w_o = store.add_uniform(format!("{name}.w_o"), &[d_model, d_model], d_model, rng);
        let state = MoSAState {
            input_proj,
            heads,
            w_o,
            norm_scale: store.add_ones(format!("{name}.norm.scale"), &[d_model]),
            norm_shift: store.add_zeros(format!("{name}.norm.shift"), &[d_model]),
            running_mean: store.add_buffer(format!("{name}.norm.running_mean"), Tensor::zeros(&[d_model])),
            running_var: store.add_buffer(format!("{name}.norm.running_var"), Tensor::ones(&[d_model])),
        };
        Ok(Self {
            name: name.to_string(),
            config,
            state,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &MoSAConfig {
        &self.config
    }

    pub fn state(&self) -> &MoSAState {
        &self.state
    }

    /// Lifts the input to `model_dim` if the block has an input projection.
    fn lift(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = *tape.shape(x).last().ok_or_else(|| dim_err!("block input is rank 0"))?;
        if f != self.config.input_dim {
            return Err(dim_err!(
                "block {} expects {} input features, got shape {:?}",
                self.name,
                self.config.input_dim,
                tape.shape(x)
            ));
        }
        match self.state.input_proj {
            Some(id) => {
                let w = tape.param(store, id);
                tape.matmul(x, w)
            }
            None => Ok(x),
        }
    }

    /// Per-head query/key/value projections of `x: [.., T, F]`.
    pub fn project_qkv(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<HeadProjection>> {
        let x = self.lift(tape, store, x)?;
        self.project_lifted(tape, store, x)
    }

    fn project_lifted(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<HeadProjection>> {
        self.state
            .heads
            .iter()
            .map(|h| {
                let (wq, wk, wv) = (
                    tape.param(store, h.w_q),
                    tape.param(store, h.w_k),
                    tape.param(store, h.w_v),
                );
                Ok(HeadProjection {
                    query: tape.matmul(x, wq)?,
                    key: tape.matmul(x, wk)?,
                    value: tape.matmul(x, wv)?,
                })
            })
            .collect()
    }

    /// Runs the block on `x: [.., T, input_dim]`, returning `[.., T, model_dim]`.
    ///
    /// `key_mask` (trailing shape `[.., T, T]`) can exclude keys beyond the
    /// causal mask. Per-head post-mask attention maps are captured on the tape
    /// under the block name.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        training: bool,
        key_mask: Option<&Mask>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let x = self.lift(tape, store, x)?;
        let shape = tape.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err!("block input must be [.., T, F], got {:?}", shape));
        }
        let t = shape[shape.len() - 2];
        if t == 0 {
            return Err(dim_err!("block input has zero tokens"));
        }

        let plan = AttentionPlan::new(cfg, t, key_mask)?;
        let heads = self.project_lifted(tape, store, x)?;
        let mut outputs = Vec::with_capacity(heads.len());
        let mut maps = Vec::with_capacity(heads.len());
        for h in heads {
            let mut scores = scaled_scores(tape, h.query, h.key)?;
            let attention = if let Some(log_w) = &plan.log_weight {
                let lw = tape.constant(log_w.clone());
                scores = tape.add(scores, lw)?;
                match &plan.normalizer_mask {
                    Some(m) => tape.softmax_lastdim_masked(scores, m)?,
                    None => tape.softmax_lastdim(scores)?,
                }
            } else {
                let a = match &plan.normalizer_mask {
                    Some(m) => tape.softmax_lastdim_masked(scores, m)?,
                    None => tape.softmax_lastdim(scores)?,
                };
                match &plan.weight {
                    Some(w) => {
                        let w = tape.constant(w.clone());
                        tape.mul(a, w)?
                    }
                    None => a,
                }
            };
            maps.push(attention);
            outputs.push(tape.matmul(attention, h.value)?);
        }
        tape.capture(self.name.clone(), maps);

        let concat = if outputs.len() > 1 {
            tape.concat(&outputs, shape.len() - 1)?
        } else {
            outputs[0]
        };
        let w_o = tape.param(store, self.state.w_o);
        let projected = tape.matmul(concat, w_o)?;
        let residual = tape.add(x, projected)?;

        let scale = tape.param(store, self.state.norm_scale);
        let shift = tape.param(store, self.state.norm_shift);
        let out = tape.batchnorm(
            residual,
            scale,
            shift,
            store.get(self.state.running_mean).data(),
            store.get(self.state.running_var).data(),
            training,
            cfg.norm_eps,
        )?;
        if training {
            tape.defer_stat_update(StatUpdate {
                node: out,
                running_mean: self.state.running_mean,
                running_var: self.state.running_var,
                momentum: cfg.norm_momentum,
            });
        }
        Ok(out)
    }

    /// Post-mask attention maps captured by the last forward on `tape`, for the
    /// sequence at flat leading index `index`.
    pub fn attention_matrices(&self, tape: &Tape, index: usize) -> Option<Vec<AttentionMatrix>> {
        let vars = tape.captured(&self.name)?;
        vars.iter()
            .enumerate()
            .map(|(head, &v)| {
                let shape = tape.shape(v);
                let t = shape[shape.len() - 1];
                let data = tape.data(v);
                let start = index * t * t;
                (start + t * t <= data.len()).then(|| AttentionMatrix {
                    head,
                    size: t,
                    values: data[start..start + t * t].to_vec(),
                })
            })
            .collect()
    }
}

/// Constant masks and weights shared by every head of one forward call.
struct AttentionPlan {
    /// Keys admitted into the softmax normalizer.
    normalizer_mask: Option<Mask>,
    /// Post-softmax multiplicative weight: modulation, causal zeros, key mask.
    weight: Option<Tensor>,
    /// Log of the weight, used instead when rows are renormalized.
    log_weight: Option<Tensor>,
}

impl AttentionPlan {
    fn new(cfg: &MoSAConfig, t: usize, key_mask: Option<&Mask>) -> Result<Self> {
        if let Some(m) = key_mask {
            let s = m.shape();
            if s.len() < 2 || s[s.len() - 1] != t || s[s.len() - 2] != t {
                return Err(dim_err!("key mask {:?} does not end in [{}, {}]", s, t, t));
            }
        }
        // Everything is laid out on the key mask's shape when one is given.
        let layout: Vec<usize> = key_mask.map_or(vec![t, t], |m| m.shape().to_vec());
        let tile = |m: &Mask| -> Mask {
            let reps = layout.iter().product::<usize>() / (t * t);
            let keep = m.keep().repeat(reps);
            Mask::new(&layout, keep).expect("tiled mask matches layout")
        };
        let causal = cfg.causal.then(|| tile(&Mask::causal(t)));

        let normalizer_mask = match (cfg.causal && cfg.normalizer == NormalizerScope::Visible, key_mask) {
            (true, Some(k)) => Some(causal.as_ref().unwrap().and(k)?),
            (true, None) => causal.clone(),
            (false, Some(k)) => Some(k.clone()),
            (false, None) => None,
        };

        let modulation = cfg
            .hawkes
            .then(|| hawkes_modulation_with(t, cfg.gamma, cfg.mu, cfg.epsilon))
            .transpose()?;
        let mut weight: Option<Tensor> = modulation.map(|m| {
            let reps = layout.iter().product::<usize>() / (t * t);
            Tensor::new(&layout, m.data().repeat(reps)).expect("tiled modulation matches layout")
        });
        if cfg.causal {
            let w = weight.take().unwrap_or_else(|| Tensor::ones(&layout));
            weight = Some(causal_weight(&w));
        }
        if let Some(k) = key_mask {
            let mut w = weight.take().unwrap_or_else(|| Tensor::ones(&layout));
            for (v, &keep) in w.data_mut().iter_mut().zip(k.keep()) {
                if !keep {
                    *v = 0.0;
                }
            }
            weight = Some(w);
        }

        if cfg.renormalize_rows {
            // softmax(s + ln w) over kept keys == (A ⊙ w) / rowsum(A ⊙ w).
            let keep_all = weight.as_ref().map(|w| {
                let keep = w.data().iter().map(|&v| v > 0.0).collect();
                Mask::new(&layout, keep).expect("layout")
            });
            let log_weight = weight.as_ref().map(|w| {
                let data = w.data().iter().map(|&v| if v > 0.0 { v.ln() } else { 0.0 }).collect();
                Tensor::new(&layout, data).expect("layout")
            });
            return Ok(Self {
                normalizer_mask: keep_all,
                weight: None,
                log_weight: log_weight.or_else(|| Some(Tensor::zeros(&layout))),
            });
        }

        Ok(Self {
            normalizer_mask,
            weight,
            log_weight: None,
        })
    }
}
