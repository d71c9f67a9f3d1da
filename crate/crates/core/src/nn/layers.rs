//! Transformer building blocks: linear maps, layer norm, multi-head
//! attention, feed-forward, the pre-norm encoder stack and the Perceiver
//! resampler.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{AttendMask, Graph, Var};
use super::params::{linear_init, normal_init, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub max_positions: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_hidden == 0
            || self.max_positions == 0
        {
            return Err(Error::InvalidArgument(format!(
                "transformer config fields must be positive: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceiverConfig {
    pub n_latents: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_model: usize,
}

impl PerceiverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_latents == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_model == 0 {
            return Err(Error::InvalidArgument(format!(
                "perceiver config fields must be positive: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "perceiver d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), linear_init(rng, d_in, d_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, d_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, d, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, d));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys_values: Var,
        mask: Rc<AttendMask>,
    ) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys_values)?;
        let v = self.value.forward(g, keys_values)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.output.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), d_hidden, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// Pre-norm encoder stack: `x + Attn(LN(x))`, then `x + FFN(LN(x))` per layer.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub config: TransformerConfig,
    pub layers: Vec<EncoderLayer>,
}

impl TransformerStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), config.d_model),
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.attn"),
                        config.d_model,
                        config.n_heads,
                        rng,
                    ),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), config.d_model),
                    ff: FeedForward::new(
                        store,
                        &format!("{p}.ff"),
                        config.d_model,
                        config.d_hidden,
                        rng,
                    ),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Rc<AttendMask>) -> Result<Var> {
        let xv = g.value(x);
        if xv.cols() != self.config.d_model || mask.n_queries() != xv.rows() {
            return Err(crate::error::shape_err(
                "transformer_forward",
                format!(
                    "input {:?} vs d_model {} and mask over {} positions",
                    xv.shape(),
                    self.config.d_model,
                    mask.n_queries()
                ),
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            let n = layer.attn_norm.forward(g, h)?;
            let a = layer.attn.forward(g, n, n, mask.clone())?;
            h = g.add(h, a)?;
            let n = layer.ff_norm.forward(g, h)?;
            let f = layer.ff.forward(g, n)?;
            h = g.add(h, f)?;
        }
        Ok(h)
    }
}

/// Runs `stack` on a constant input outside any training graph.
pub fn transformer_forward(
    store: &ParamStore,
    stack: &TransformerStack,
    inputs: &Tensor,
    mask: &AttendMask,
) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let x = g.constant(inputs.clone());
    let y = stack.forward(&mut g, x, Rc::new(mask.clone()))?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct PerceiverLayer {
    pub cross_query_norm: LayerNorm,
    pub cross_input_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// Latent-array resampler: a fixed number of learned latents cross-attend
/// to a variable-length input, then self-attend and pass through an FFN.
/// The latents are layer-normalized on the way out.
#[derive(Clone, Debug)]
pub struct Perceiver {
    pub config: PerceiverConfig,
    pub latents: ParamId,
    pub layers: Vec<PerceiverLayer>,
    pub output_norm: LayerNorm,
}

impl Perceiver {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: &PerceiverConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let latents = store.add(
            format!("{name}.latents"),
            normal_init(rng, config.n_latents, d, 0.02),
        );
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                PerceiverLayer {
                    cross_query_norm: LayerNorm::new(store, &format!("{p}.cross_query_norm"), d),
                    cross_input_norm: LayerNorm::new(store, &format!("{p}.cross_input_norm"), d),
                    cross_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.cross_attn"),
                        d,
                        config.n_heads,
                        rng,
                    ),
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d),
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.self_attn"),
                        d,
                        config.n_heads,
                        rng,
                    ),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, 4 * d, rng),
                }
            })
            .collect();
        let output_norm = LayerNorm::new(store, &format!("{name}.output_norm"), d);
        Ok(Self {
            config: config.clone(),
            latents,
            layers,
            output_norm,
        })
    }

    /// Resamples `n_groups` independent inputs at once.
    ///
    /// `inputs` rows belong to the group named by `input_groups`; the output
    /// holds `n_latents` rows per group, group `r` occupying rows
    /// `r·n_latents .. (r+1)·n_latents`. A group with no input rows receives
    /// no cross-attention contribution.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: Var,
        input_groups: &[usize],
        n_groups: usize,
    ) -> Result<Var> {
        let n_lat = self.config.n_latents;
        if g.value(inputs).rows() != input_groups.len() {
            return Err(crate::error::shape_err(
                "perceiver",
                "input_groups length differs from input rows",
            ));
        }
        let latent_groups: Vec<usize> = (0..n_groups)
            .flat_map(|r| std::iter::repeat_n(r, n_lat))
            .collect();
        let tile: Vec<usize> = (0..n_groups).flat_map(|_| 0..n_lat).collect();
        let cross_mask = Rc::new(AttendMask::from_segments(&latent_groups, input_groups));
        let self_mask = Rc::new(AttendMask::self_segments(&latent_groups));

        let base = g.param(self.latents);
        let mut lat = g.gather(base, &tile)?;
        for layer in &self.layers {
            let q = layer.cross_query_norm.forward(g, lat)?;
            let kv = layer.cross_input_norm.forward(g, inputs)?;
            let a = layer.cross_attn.forward(g, q, kv, cross_mask.clone())?;
            lat = g.add(lat, a)?;
            let n = layer.self_norm.forward(g, lat)?;
            let a = layer.self_attn.forward(g, n, n, self_mask.clone())?;
            lat = g.add(lat, a)?;
            let n = layer.ff_norm.forward(g, lat)?;
            let f = layer.ff.forward(g, n)?;
            lat = g.add(lat, f)?;
        }
        self.output_norm.forward(g, lat)
    }
}

/// Resamples one input sequence (`m × d_model`, `m ≥ 0`) to `n_latents × d_model`.
pub fn perceiver_resample(
    store: &ParamStore,
    perceiver: &Perceiver,
    inputs: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let x = g.constant(inputs.clone());
    let groups = vec![0; inputs.rows()];
    let y = perceiver.forward(&mut g, x, &groups, 1)?;
    Ok(g.value(y).clone())
}
