//! The Flare model: ID embeddings fused with Perceiver-resampled text,
//! a masked-item transformer, and its losses.
//!
//! Every input position gets `c = e + t`, where `e` is the ID embedding and
//! `t` the projected mean of the Perceiver latents over the position's text
//! rows. Text rows carry a type embedding: `θ_T` for item text, `θ_S` for
//! critique text. At a masked position the ID embedding becomes `e_mask`;
//! in critique mode its text is `[S' ; text_mask]`, so the critique stays
//! visible while the item's own text is hidden.
//!
//! The transformer input is `LayerNorm(c) + position`.

mod check;
mod loss;

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use check::{toy_batch, toy_grad_check, toy_items, toy_model_config, ToyCheckConfig, TOY_ITEMS};
pub use loss::{contrastive_loss, loss_contrastive, loss_mlm, loss_total, LossConfig};

use crate::data::{pack_batches, MaskedSequence, PackedBatch, Token};
use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::params::normal_init;
use crate::nn::{
    AttendMask, Graph, ParamId, ParamStore, Perceiver, PerceiverConfig, Tensor, TransformerConfig,
    TransformerStack, Var,
};
use crate::textenc::{EmbeddingCache, TextEncoder};

const INIT_STD: f64 = 0.02;
/// Position embeddings are added after the fused item vectors are
/// layer-normalized, so they start on the same unit scale.
const POSITION_INIT_STD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    IdOnly,
    TextId,
    TextIdCritique,
}

impl FusionMode {
    pub fn uses_text(self) -> bool {
        self != FusionMode::IdOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlareConfig {
    pub n_items: usize,
    pub mode: FusionMode,
    pub transformer: TransformerConfig,
    /// `None` in a text mode replaces the resampler with a mean over the
    /// projected text rows.
    pub perceiver: Option<PerceiverConfig>,
    pub d_text: usize,
    pub init_seed: u64,
}

impl FlareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::InvalidArgument("model needs at least one item".into()));
        }
        self.transformer.validate()?;
        if let Some(p) = &self.perceiver {
            p.validate()?;
            if p.d_model != self.transformer.d_model {
                return Err(Error::InvalidArgument(format!(
                    "perceiver d_model {} differs from transformer d_model {}",
                    p.d_model, self.transformer.d_model
                )));
            }
        }
        if self.mode.uses_text() && self.d_text == 0 {
            return Err(Error::InvalidArgument("d_text must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen text inputs: per-item encodings and an encoder for critiques.
#[derive(Clone)]
pub struct TextContext {
    pub cache: Arc<EmbeddingCache>,
    pub encoder: Arc<dyn TextEncoder>,
}

impl TextContext {
    pub fn new(cache: Arc<EmbeddingCache>, encoder: Arc<dyn TextEncoder>) -> Result<Self> {
        if cache.d_text() != encoder.dim() {
            return Err(Error::DimMismatch {
                expected: cache.d_text(),
                found: encoder.dim(),
                context: "critique encoder vs item cache".into(),
            });
        }
        Ok(Self { cache, encoder })
    }
}

#[derive(Clone, Debug)]
struct TextPath {
    input_projection: Linear,
    perceiver: Option<Perceiver>,
    output_projection: Linear,
    theta_t: ParamId,
    theta_s: ParamId,
    text_mask: ParamId,
}

/// Architecture and parameter handles; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Flare {
    pub config: FlareConfig,
    item_embeddings: ParamId,
    position_embeddings: ParamId,
    stack: TransformerStack,
    output_norm: LayerNorm,
    embedding_norm: LayerNorm,
    text: Option<TextPath>,
}

/// Which text rows feed one Perceiver group.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum GroupKey {
    Item(usize),
    Masked(Option<String>),
}

pub struct Forward {
    /// `#mask_slots × n_items`.
    pub logits: Var,
    pub labels: Vec<usize>,
    /// ID and text embeddings of the batch's unique items, row-paired.
    pub pairs: Option<(Var, Var)>,
}

pub struct Losses {
    pub total: Var,
    pub mlm: Var,
    pub contrastive: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Flare {
    /// Builds the architecture and its initial parameters. ID-path tensors
    /// are drawn before text-path tensors, so a model's ID path does not
    /// depend on its fusion mode.
    pub fn new(config: &FlareConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let tc = &config.transformer;
        let d = tc.d_model;
        let item_embeddings = store.add(
            "item_embeddings",
            normal_init(&mut rng, config.n_items + 2, d, INIT_STD),
        );
        let position_embeddings = store.add(
            "position_embeddings",
            normal_init(&mut rng, tc.max_positions, d, POSITION_INIT_STD),
        );
        let stack = TransformerStack::new(&mut store, "transformer", tc, &mut rng)?;
        let output_norm = LayerNorm::new(&mut store, "output_norm", d);
        let embedding_norm = LayerNorm::new(&mut store, "embedding_norm", d);
        let text = if config.mode.uses_text() {
            let dt = config.d_text;
            let input_projection = Linear::new(&mut store, "text_input_projection", dt, d, &mut rng);
            let perceiver = match &config.perceiver {
                Some(p) => Some(Perceiver::new(&mut store, "perceiver", p, &mut rng)?),
                None => None,
            };
            let output_projection = Linear::new(&mut store, "output_projection", d, d, &mut rng);
            let theta_t = store.add("theta_t", normal_init(&mut rng, 1, dt, INIT_STD));
            let theta_s = store.add("theta_s", normal_init(&mut rng, 1, dt, INIT_STD));
            let text_mask = store.add("text_mask_embedding", normal_init(&mut rng, 1, dt, INIT_STD));
            Some(TextPath {
                input_projection,
                perceiver,
                output_projection,
                theta_t,
                theta_s,
                text_mask,
            })
        } else {
            None
        };
        Ok((
            Self {
                config: config.clone(),
                item_embeddings,
                position_embeddings,
                stack,
                output_norm,
                embedding_norm,
                text,
            },
            store,
        ))
    }

    pub fn item_embeddings(&self) -> ParamId {
        self.item_embeddings
    }

    pub fn mask_index(&self) -> usize {
        self.config.n_items
    }

    /// Parameters of the text path after the resampler; zeroing them makes
    /// `t = 0` exactly.
    pub fn output_projection(&self) -> Option<(ParamId, ParamId)> {
        self.text
            .as_ref()
            .map(|t| (t.output_projection.weight, t.output_projection.bias))
    }

    fn text_ctx<'a>(&self, text: Option<&'a TextContext>) -> Result<&'a TextContext> {
        let ctx = text.ok_or_else(|| {
            Error::InvalidArgument("text mode requires a text context".into())
        })?;
        if ctx.cache.d_text() != self.config.d_text {
            return Err(Error::DimMismatch {
                expected: self.config.d_text,
                found: ctx.cache.d_text(),
                context: "embedding cache".into(),
            });
        }
        if ctx.cache.len() != self.config.n_items {
            return Err(Error::InvalidArgument(format!(
                "embedding cache holds {} items, model {}",
                ctx.cache.len(),
                self.config.n_items
            )));
        }
        Ok(ctx)
    }

    /// `t` for each group: `[n_groups × d_model]`.
    fn text_vectors(
        &self,
        g: &mut Graph,
        path: &TextPath,
        ctx: &TextContext,
        groups: &[GroupKey],
    ) -> Result<Var> {
        let dt = self.config.d_text;
        let mut raw: Vec<f64> = Vec::new();
        let mut types: Vec<usize> = Vec::new();
        let mut input_groups: Vec<usize> = Vec::new();
        for (gi, key) in groups.iter().enumerate() {
            match key {
                GroupKey::Item(i) => {
                    let t = ctx.cache.get(*i)?;
                    raw.extend_from_slice(t.data());
                    types.extend(std::iter::repeat_n(0, t.rows()));
                    input_groups.extend(std::iter::repeat_n(gi, t.rows()));
                }
                GroupKey::Masked(critique) => {
                    if let Some(c) = critique {
                        let s = ctx.encoder.encode(c);
                        if s.cols() != dt {
                            return Err(Error::DimMismatch {
                                expected: dt,
                                found: s.cols(),
                                context: "critique encoding".into(),
                            });
                        }
                        raw.extend_from_slice(s.data());
                        types.extend(std::iter::repeat_n(1, s.rows()));
                        input_groups.extend(std::iter::repeat_n(gi, s.rows()));
                    }
                    raw.extend(std::iter::repeat_n(0.0, dt));
                    types.push(2);
                    input_groups.push(gi);
                }
            }
        }
        let m = types.len();
        let raw = g.constant(Tensor::from_vec(m, dt, raw)?);
        let th_t = g.param(path.theta_t);
        let th_s = g.param(path.theta_s);
        let tm = g.param(path.text_mask);
        let type_table = g.concat_rows(&[th_t, th_s, tm])?;
        let typed = g.gather(type_table, &types)?;
        let x = g.add(raw, typed)?;
        let x = path.input_projection.forward(g, x)?;
        let pooled = match &path.perceiver {
            Some(p) => {
                let lat = p.forward(g, x, &input_groups, groups.len())?;
                let n_lat = p.config.n_latents;
                let pools = (0..groups.len())
                    .map(|r| (r * n_lat..(r + 1) * n_lat).collect())
                    .collect();
                g.group_mean(lat, pools)?
            }
            None => {
                let mut pools = vec![Vec::new(); groups.len()];
                for (row, &gi) in input_groups.iter().enumerate() {
                    pools[gi].push(row);
                }
                g.group_mean(x, pools)?
            }
        };
        path.output_projection.forward(g, pooled)
    }

    /// Logits at every mask slot of `batch`, plus contrastive pairs when
    /// `want_pairs` is set in a text mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &PackedBatch,
        text: Option<&TextContext>,
        want_pairs: bool,
    ) -> Result<Forward> {
        let n = self.config.n_items;
        let d = self.config.transformer.d_model;
        let max_pos = self.config.transformer.max_positions;
        if batch.tokens.len() != batch.segment_ids.len()
            || batch.tokens.len() != batch.positions.len()
        {
            return Err(shape_err("forward_mlm", "ragged packed batch"));
        }
        if batch.mask_slots.is_empty() {
            return Err(Error::InvalidArgument("batch has no mask slots".into()));
        }
        let mut idx = Vec::with_capacity(batch.tokens.len());
        for tok in &batch.tokens {
            idx.push(match *tok {
                Token::Item(i) if i < n => i,
                Token::Item(i) => return Err(Error::UnknownItemIndex(i)),
                Token::Mask => n,
            });
        }
        if let Some(&p) = batch.positions.iter().find(|&&p| p >= max_pos) {
            return Err(Error::InvalidArgument(format!(
                "position {p} beyond max_positions {max_pos}"
            )));
        }
        let mut labels = Vec::with_capacity(batch.mask_slots.len());
        for s in &batch.mask_slots {
            if batch.tokens.get(s.offset) != Some(&Token::Mask) {
                return Err(Error::InvalidArgument(format!(
                    "mask slot at offset {} does not hold a mask token",
                    s.offset
                )));
            }
            if s.label >= n {
                return Err(Error::UnknownItemIndex(s.label));
            }
            labels.push(s.label);
        }

        let emb = g.param(self.item_embeddings);
        let mut c = g.gather(emb, &idx)?;
        let mut pairs = None;
        if let (true, Some(path)) = (self.config.mode.uses_text(), &self.text) {
            let ctx = self.text_ctx(text)?;
            let mut keys: Vec<GroupKey> = Vec::new();
            let mut lookup: HashMap<GroupKey, usize> = HashMap::new();
            let mut intern = |k: GroupKey, keys: &mut Vec<GroupKey>| -> usize {
                *lookup.entry(k.clone()).or_insert_with(|| {
                    keys.push(k);
                    keys.len() - 1
                })
            };
            let none = usize::MAX;
            let mut tok_group = Vec::with_capacity(batch.tokens.len());
            for (j, tok) in batch.tokens.iter().enumerate() {
                tok_group.push(match tok {
                    Token::Item(i) => intern(GroupKey::Item(*i), &mut keys),
                    Token::Mask if self.config.mode == FusionMode::TextIdCritique => {
                        let crit = batch
                            .critiques
                            .get(j)
                            .cloned()
                            .flatten()
                            .filter(|s| !s.trim().is_empty());
                        intern(GroupKey::Masked(crit), &mut keys)
                    }
                    Token::Mask => none,
                });
            }
            let mut pair_items: Vec<usize> = Vec::new();
            let mut pair_groups: Vec<usize> = Vec::new();
            if want_pairs {
                let mut seen = vec![false; n];
                let visible = batch.tokens.iter().filter_map(|t| match t {
                    Token::Item(i) => Some(*i),
                    Token::Mask => None,
                });
                for i in visible.chain(labels.iter().copied()) {
                    if !seen[i] {
                        seen[i] = true;
                        pair_items.push(i);
                        pair_groups.push(intern(GroupKey::Item(i), &mut keys));
                    }
                }
            }
            let t = self.text_vectors(g, path, ctx, &keys)?;
            let zero = g.constant(Tensor::zeros(1, d));
            let padded = g.concat_rows(&[t, zero])?;
            let rows: Vec<usize> = tok_group
                .iter()
                .map(|&gi| if gi == none { keys.len() } else { gi })
                .collect();
            let t_tok = g.gather(padded, &rows)?;
            c = g.add(c, t_tok)?;
            if want_pairs {
                let e_pairs = g.gather(emb, &pair_items)?;
                let t_pairs = g.gather(t, &pair_groups)?;
                pairs = Some((e_pairs, t_pairs));
            }
        }

        let c = self.embedding_norm.forward(g, c)?;
        let pos = g.param(self.position_embeddings);
        let p = g.gather(pos, &batch.positions)?;
        let x = g.add(c, p)?;
        let mask = Rc::new(AttendMask::self_segments(&batch.segment_ids));
        let h = self.stack.forward(g, x, mask)?;
        let offsets: Vec<usize> = batch.mask_slots.iter().map(|s| s.offset).collect();
        let h = g.gather(h, &offsets)?;
        let h = self.output_norm.forward(g, h)?;
        let items = g.slice_rows(emb, 0, n)?;
        let logits = g.matmul_nt(h, items)?;
        Ok(Forward {
            logits,
            labels,
            pairs,
        })
    }

    /// MLM loss, contrastive loss (text modes, when enabled) and their
    /// weighted total. `Sum` reduction adds MLM terms over slots instead of
    /// averaging them.
    pub fn losses(
        &self,
        g: &mut Graph,
        batch: &PackedBatch,
        text: Option<&TextContext>,
        cfg: &LossConfig,
        reduction: Reduction,
    ) -> Result<Losses> {
        cfg.validate()?;
        let contrastive = cfg.contrastive_enabled && self.config.mode.uses_text();
        let fwd = self.forward(g, batch, text, contrastive)?;
        let w = match reduction {
            Reduction::Mean => 1.0 / fwd.labels.len() as f64,
            Reduction::Sum => 1.0,
        };
        let mlm = g.cross_entropy(fwd.logits, &fwd.labels, w)?;
        match fwd.pairs {
            Some((e, t)) => {
                let lc = contrastive_loss(g, e, t, cfg.tau, cfg.margin)?;
                let total = g.weighted_sum(&[(mlm, cfg.alpha), (lc, 1.0 - cfg.alpha)])?;
                Ok(Losses {
                    total,
                    mlm,
                    contrastive: Some(lc),
                })
            }
            None => Ok(Losses {
                total: mlm,
                mlm,
                contrastive: None,
            }),
        }
    }

    /// `c` for a single item outside any batch: `e` plus the text vector of
    /// `[critique + θ_S ; text + θ_T]`.
    pub fn fuse_item(
        &self,
        store: &ParamStore,
        e: &Tensor,
        text_seq: &Tensor,
        critique_seq: Option<&Tensor>,
    ) -> Result<Tensor> {
        let d = self.config.transformer.d_model;
        if e.shape() != [1, d] {
            return Err(shape_err("fuse_item", format!("e {:?}", e.shape())));
        }
        let Some(path) = &self.text else {
            return Ok(e.clone());
        };
        let dt = self.config.d_text;
        let crit_rows = critique_seq.map_or(0, |s| s.rows());
        for s in std::iter::once(text_seq).chain(critique_seq) {
            if s.cols() != dt {
                return Err(Error::DimMismatch {
                    expected: dt,
                    found: s.cols(),
                    context: "fuse_item".into(),
                });
            }
        }
        let mut g = Graph::new(store);
        let mut raw = Vec::new();
        if let Some(s) = critique_seq {
            raw.extend_from_slice(s.data());
        }
        raw.extend_from_slice(text_seq.data());
        let m = crit_rows + text_seq.rows();
        let types: Vec<usize> = (0..m).map(|r| usize::from(r >= crit_rows)).collect();
        let raw = g.constant(Tensor::from_vec(m, dt, raw)?);
        let th_s = g.param(path.theta_s);
        let th_t = g.param(path.theta_t);
        let table = g.concat_rows(&[th_s, th_t])?;
        let typed = g.gather(table, &types)?;
        let x = g.add(raw, typed)?;
        let x = path.input_projection.forward(&mut g, x)?;
        let pooled = match &path.perceiver {
            Some(p) => {
                let lat = p.forward(&mut g, x, &vec![0; m], 1)?;
                g.group_mean(lat, vec![(0..p.config.n_latents).collect()])?
            }
            None => g.group_mean(x, vec![(0..m).collect()])?,
        };
        let t = path.output_projection.forward(&mut g, pooled)?;
        let mut c = g.value(t).clone();
        c.add_assign(e);
        Ok(c)
    }
}

/// One ranking request: score all items for the slot after `history`.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub history: Vec<usize>,
    pub critique: Option<String>,
}

/// A model with its parameter values and frozen text inputs.
#[derive(Clone)]
pub struct FlareModel {
    pub net: Flare,
    pub params: ParamStore,
    pub text: Option<TextContext>,
}

impl FlareModel {
    pub fn new(config: &FlareConfig, text: Option<TextContext>) -> Result<Self> {
        let (net, params) = Flare::new(config)?;
        Self::from_parts(net, params, text)
    }

    pub fn from_parts(net: Flare, params: ParamStore, text: Option<TextContext>) -> Result<Self> {
        if net.config.mode.uses_text() {
            net.text_ctx(text.as_ref())?;
        }
        Ok(Self { net, params, text })
    }

    pub fn config(&self) -> &FlareConfig {
        &self.net.config
    }

    pub fn n_items(&self) -> usize {
        self.net.config.n_items
    }

    /// Logits for every mask slot of `batch`.
    pub fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let fwd = self.net.forward(&mut g, batch, self.text.as_ref(), false)?;
        Ok(g.value(fwd.logits).clone())
    }

    fn prediction_input(&self, q: &Query) -> Result<MaskedSequence> {
        if q.history.is_empty() {
            return Err(Error::InvalidArgument("history must be non-empty".into()));
        }
        if let Some(&bad) = q.history.iter().find(|&&i| i >= self.n_items()) {
            return Err(Error::UnknownItemIndex(bad));
        }
        let keep = self.net.config.transformer.max_positions - 1;
        let start = q.history.len().saturating_sub(keep);
        Ok(MaskedSequence::for_prediction(
            &q.history[start..],
            q.critique.clone(),
        ))
    }

    /// Full-vocabulary scores for each query, in query order. Queries are
    /// packed into examples of at most `token_budget` tokens.
    pub fn score_queries(&self, queries: &[Query], token_budget: usize) -> Result<Vec<Vec<f64>>> {
        let inputs = queries
            .iter()
            .map(|q| self.prediction_input(q))
            .collect::<Result<Vec<_>>>()?;
        let budget = token_budget.max(self.net.config.transformer.max_positions);
        let mut out = vec![Vec::new(); queries.len()];
        for batch in pack_batches(&inputs, budget)? {
            let logits = self.logits(&batch)?;
            for (slot, &src) in batch.sources.iter().enumerate() {
                out[src] = logits.row(slot).to_vec();
            }
        }
        Ok(out)
    }

    /// Top `k` items after `history`, by score descending then index ascending.
    pub fn predict_topk(
        &self,
        history: &[usize],
        critique: Option<&str>,
        k: usize,
    ) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = Query {
            history: history.to_vec(),
            critique: critique.map(str::to_owned),
        };
        let batch = PackedBatch::single(&self.prediction_input(&q)?);
        let logits = self.logits(&batch)?;
        Ok(rank_scores(logits.row(0), k))
    }
}

/// Indices of the `k` best scores (clamped to the vocabulary), ties by index.
pub fn rank_scores(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order.into_iter().map(|i| (i, scores[i])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Item;
    use crate::textenc::StandInEncoder;

    fn toy(mode: FusionMode) -> FlareModel {
        let items: Vec<Item> = (0..6)
            .map(|i| Item {
                title: format!("thing {i}"),
                categories: vec!["a".into(), format!("b{}", i % 2)],
                ..Item::bare(format!("I{i}"), i)
            })
            .collect();
        let enc = Arc::new(StandInEncoder::new(3, 128, 8));
        let cache = Arc::new(EmbeddingCache::build(&items, &enc));
        let config = FlareConfig {
            n_items: 6,
            mode,
            transformer: TransformerConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_hidden: 16,
                max_positions: 8,
            },
            perceiver: Some(PerceiverConfig {
                n_latents: 2,
                n_heads: 2,
                n_layers: 1,
                d_model: 8,
            }),
            d_text: 8,
            init_seed: 11,
        };
        FlareModel::new(&config, Some(TextContext::new(cache, enc).unwrap())).unwrap()
    }

    #[test]
    fn logits_cover_real_items_at_slots() {
        let m = toy(FusionMode::IdOnly);
        let seq = MaskedSequence::with_positions(&[1, 2, 3, 4, 5], &[1, 3]);
        let logits = m.logits(&PackedBatch::single(&seq)).unwrap();
        assert_eq!(logits.shape(), [2, 6]);
    }

    #[test]
    fn topk_clamped_and_deterministic() {
        let m = toy(FusionMode::TextId);
        let a = m.predict_topk(&[0, 1], None, 50).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, m.predict_topk(&[0, 1], None, 50).unwrap());
        assert!(a.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(matches!(
            m.predict_topk(&[9], None, 1),
            Err(Error::UnknownItemIndex(9))
        ));
    }

    #[test]
    fn critique_only_matters_in_critique_mode() {
        for (mode, differs) in [(FusionMode::TextId, false), (FusionMode::TextIdCritique, true)] {
            let m = toy(mode);
            let a = m.predict_topk(&[0, 1], Some("a - b0"), 6).unwrap();
            let b = m.predict_topk(&[0, 1], Some("a - b1"), 6).unwrap();
            assert_eq!(a != b, differs, "{mode:?}");
        }
    }

    #[test]
    fn empty_critique_equals_none() {
        let m = toy(FusionMode::TextIdCritique);
        assert_eq!(
            m.predict_topk(&[2, 3], Some(""), 6).unwrap(),
            m.predict_topk(&[2, 3], None, 6).unwrap()
        );
        let e = Tensor::row_vector(vec![0.5; 8]);
        let text = m.text.as_ref().unwrap().cache.get(2).unwrap().clone();
        let empty = Tensor::zeros(0, 8);
        assert_eq!(
            m.net.fuse_item(&m.params, &e, &text, Some(&empty)).unwrap(),
            m.net.fuse_item(&m.params, &e, &text, None).unwrap()
        );
    }

    #[test]
    fn zeroed_projection_fuses_to_id() {
        let mut m = toy(FusionMode::TextId);
        let (w, b) = m.net.output_projection().unwrap();
        m.params.get_mut(w).fill(0.0);
        m.params.get_mut(b).fill(0.0);
        let e = Tensor::row_vector((0..8).map(|v| v as f64).collect());
        let text = m.text.as_ref().unwrap().cache.get(0).unwrap().clone();
        assert_eq!(m.net.fuse_item(&m.params, &e, &text, None).unwrap(), e);
    }

    #[test]
    fn rank_ties_by_index() {
        let r = rank_scores(&[1.0, 2.0, 2.0, 0.0], 3);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 0]);
    }
}
