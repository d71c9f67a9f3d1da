//! Training loop, configuration, presets and ablation switches.

mod presets;

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use presets::{load_preset, preset_names};

use crate::data::{
    mask_sequence, pack_batches, CorpusBundle, Item, MaskMode, MaskedSequence, PackedBatch,
    DEFAULT_MASK_RATE,
};
use crate::error::{Error, Result};
use crate::flare::{Flare, FlareConfig, FlareModel, FusionMode, LossConfig, Reduction, TextContext};
use crate::nn::checkpoint::{read_checkpoint, restore_params, write_checkpoint};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, PerceiverConfig, TransformerConfig};
use crate::textenc::{
    load_precomputed, EmbeddingCache, Provenance, StandInEncoder, DEFAULT_BUCKETS, DEFAULT_D_TEXT,
    DEFAULT_ENCODER_SEED,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub seed: u64,
    pub buckets: usize,
    pub d_text: usize,
    /// Precomputed item embeddings; items missing from it use the stand-in.
    pub precomputed: Option<PathBuf>,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_ENCODER_SEED,
            buckets: DEFAULT_BUCKETS,
            d_text: DEFAULT_D_TEXT,
            precomputed: None,
        }
    }
}

/// Relative frequency of each critique level attached to masked positions
/// in critique-mode training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CritiqueMix {
    pub precise: f64,
    pub broad: f64,
    pub none: f64,
}

impl Default for CritiqueMix {
    fn default() -> Self {
        Self {
            precise: 0.4,
            broad: 0.3,
            none: 0.3,
        }
    }
}

impl CritiqueMix {
    /// Number of category levels to reveal, `None` for no critique.
    fn sample<R: Rng>(&self, rng: &mut R) -> Option<usize> {
        let total = self.precise + self.broad + self.none;
        let u = rng.random::<f64>() * total;
        if u < self.precise {
            Some(4)
        } else if u < self.precise + self.broad {
            Some(2)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: Option<String>,
    pub transformer: TransformerConfig,
    pub perceiver: Option<PerceiverConfig>,
    pub loss: LossConfig,
    pub lr: f64,
    /// Packed examples per optimizer step.
    pub batch: usize,
    /// Tokens per packed example.
    pub token_budget: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub mask_mode: MaskMode,
    pub fusion: FusionMode,
    /// Collapse consecutive repeated items in training sequences.
    pub dedup: bool,
    pub seed: u64,
    pub critique_mix: CritiqueMix,
    pub text_encoder: TextEncoderConfig,
    /// Defaults to `max(total_steps / 10, 100)`.
    pub checkpoint_every: Option<usize>,
    pub note: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: None,
            transformer: TransformerConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 64,
                d_hidden: 256,
                max_positions: 51,
            },
            perceiver: None,
            loss: LossConfig::default(),
            lr: 1e-3,
            batch: 1,
            token_budget: 512,
            total_steps: 1000,
            weight_decay: 0.0,
            mask_rate: DEFAULT_MASK_RATE,
            mask_mode: MaskMode::Bidirectional,
            fusion: FusionMode::IdOnly,
            dedup: false,
            seed: 0,
            critique_mix: CritiqueMix::default(),
            text_encoder: TextEncoderConfig::default(),
            checkpoint_every: None,
            note: None,
        }
    }
}

/// The five component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoText,
    NoPerceiver,
    NoBidirectionalMasking,
    NoContrastive,
    NoDuplicates,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoText,
        Ablation::NoPerceiver,
        Ablation::NoBidirectionalMasking,
        Ablation::NoContrastive,
        Ablation::NoDuplicates,
    ];

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Ablation::NoText => {
                cfg.fusion = FusionMode::IdOnly;
                cfg.perceiver = None;
            }
            Ablation::NoPerceiver => cfg.perceiver = None,
            Ablation::NoBidirectionalMasking => cfg.mask_mode = MaskMode::LastOnly,
            Ablation::NoContrastive => cfg.loss.contrastive_enabled = false,
            Ablation::NoDuplicates => cfg.dedup = true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        self.loss.validate()?;
        if let Some(p) = &self.perceiver {
            p.validate()?;
        }
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.token_budget < self.transformer.max_positions {
            return bad(format!(
                "token_budget {} below max_positions {}",
                self.token_budget, self.transformer.max_positions
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr {} / weight_decay {}", self.lr, self.weight_decay));
        }
        let m = &self.critique_mix;
        if [m.precise, m.broad, m.none].iter().any(|w| !(*w >= 0.0))
            || m.precise + m.broad + m.none <= 0.0
        {
            return bad("critique_mix weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every
            .unwrap_or((self.total_steps / 10).max(100))
            .max(1)
    }

    pub fn model_config(&self, n_items: usize) -> FlareConfig {
        FlareConfig {
            n_items,
            mode: self.fusion,
            transformer: self.transformer.clone(),
            perceiver: if self.fusion.uses_text() {
                self.perceiver.clone()
            } else {
                None
            },
            d_text: self.text_encoder.d_text,
            init_seed: self.seed,
        }
    }
}

/// Item encodings and critique encoder for a text-mode model.
pub fn build_text_context(enc: &TextEncoderConfig, items: &[Item]) -> Result<TextContext> {
    let stand_in = StandInEncoder::new(enc.seed, enc.buckets, enc.d_text);
    let cache = match &enc.precomputed {
        Some(path) => load_precomputed(path, items, &stand_in)?.0,
        None => EmbeddingCache::build(items, &stand_in),
    };
    TextContext::new(Arc::new(cache), Arc::new(stand_in))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_mlm: f64,
    pub l_c: Option<f64>,
    pub l_total: f64,
    /// Sequences in this step's packed examples.
    pub eff_batch: usize,
    pub wall_ms: f64,
}

/// Echoed into every checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: FlareConfig,
    pub train: TrainConfig,
    pub corpus_hash: String,
    pub text: Option<Provenance>,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedCheckpoint {
    pub step: usize,
    pub path: PathBuf,
    pub sha256: String,
}

pub struct TrainOutcome {
    pub model: FlareModel,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<SavedCheckpoint>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn dedup_consecutive(items: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(items.len());
    for &i in items {
        if out.last() != Some(&i) {
            out.push(i);
        }
    }
    out
}

/// Infinite, seeded stream of training sequence indices, reshuffled per epoch.
struct SequenceStream {
    n: usize,
    queue: VecDeque<usize>,
}

impl SequenceStream {
    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.queue.is_empty() {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(rng);
            self.queue.extend(order);
        }
        self.queue.pop_front().expect("refilled above")
    }

    fn push_front(&mut self, idx: &[usize]) {
        for &i in idx.iter().rev() {
            self.queue.push_front(i);
        }
    }
}

fn attach_critiques<R: Rng>(
    seq: &mut MaskedSequence,
    items: &[Item],
    mix: &CritiqueMix,
    rng: &mut R,
) {
    for (&p, &label) in seq.masked_positions.iter().zip(&seq.labels) {
        seq.critiques[p] = mix
            .sample(rng)
            .map(|levels| items[label].category_prefix(levels))
            .filter(|s| !s.is_empty());
    }
}

/// Writes checkpoint `path` and returns its SHA-256.
pub fn save_model(path: &Path, model: &FlareModel, meta: &CheckpointMeta) -> Result<String> {
    write_checkpoint(path, &serde_json::to_value(meta)?, &model.params)
}

/// Restores a checkpoint against the corpus it was trained on.
pub fn load_model(path: &Path, bundle: &CorpusBundle) -> Result<(FlareModel, CheckpointMeta, String)> {
    let ckpt = read_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.config.clone())?;
    if meta.model.n_items != bundle.items.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} items, corpus {}",
            meta.model.n_items,
            bundle.items.len()
        )));
    }
    let corpus_hash = bundle.content_hash()?;
    if corpus_hash != meta.corpus_hash {
        log::warn!("checkpoint was trained on corpus {}, loading against {corpus_hash}", meta.corpus_hash);
    }
    let (net, mut params) = Flare::new(&meta.model)?;
    restore_params(&mut params, &ckpt)?;
    let text = if meta.model.mode.uses_text() {
        Some(build_text_context(&meta.train.text_encoder, &bundle.items)?)
    } else {
        None
    };
    Ok((FlareModel::from_parts(net, params, text)?, meta, ckpt.sha256))
}

/// Runs `cfg.total_steps` optimizer steps on the bundle's training split.
/// With `out_dir`, writes the JSON-lines log, periodic checkpoints and
/// `final.ckpt` there.
pub fn train(cfg: &TrainConfig, bundle: &CorpusBundle, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let text = if cfg.fusion.uses_text() {
        Some(build_text_context(&cfg.text_encoder, &bundle.items)?)
    } else {
        None
    };
    train_with_text(cfg, bundle, text, out_dir)
}

/// [`train`] with a caller-supplied text context.
pub fn train_with_text(
    cfg: &TrainConfig,
    bundle: &CorpusBundle,
    text: Option<TextContext>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let items = &bundle.items;
    let max_len = cfg.transformer.max_positions.min(cfg.token_budget);
    let seqs: Vec<Vec<usize>> = bundle
        .split
        .train
        .iter()
        .map(|t| {
            let s = if cfg.dedup {
                dedup_consecutive(&t.items)
            } else {
                t.items.clone()
            };
            s[s.len().saturating_sub(max_len)..].to_vec()
        })
        .filter(|s| !s.is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no training sequences".into()));
    }

    let model_cfg = cfg.model_config(items.len());
    let mut model = FlareModel::new(&model_cfg, text)?;
    let meta_for = |step: usize| -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            model: model_cfg.clone(),
            train: cfg.clone(),
            corpus_hash: bundle.content_hash()?,
            text: None,
            step,
        })
    };
    let provenance = model.text.as_ref().map(|t| t.cache.provenance().clone());
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(model.params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stream = SequenceStream {
        n: seqs.len(),
        queue: VecDeque::new(),
    };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut checkpoints = Vec::new();
    let every = cfg.checkpoint_interval();
    let capacity = cfg.batch * cfg.token_budget;

    for step in 1..=cfg.total_steps {
        let started = Instant::now();
        let mut chosen = Vec::new();
        let mut tokens = 0;
        while chosen.len() < seqs.len() {
            let i = stream.next(&mut rng);
            if tokens + seqs[i].len() > capacity && !chosen.is_empty() {
                stream.push_front(&[i]);
                break;
            }
            tokens += seqs[i].len();
            chosen.push(i);
        }
        let masked: Vec<MaskedSequence> = chosen
            .iter()
            .map(|&i| {
                let mut m = mask_sequence(&seqs[i], cfg.mask_rate, &mut rng, cfg.mask_mode);
                if cfg.fusion == FusionMode::TextIdCritique {
                    attach_critiques(&mut m, items, &cfg.critique_mix, &mut rng);
                }
                m
            })
            .collect();
        let mut bins = pack_batches(&masked, cfg.token_budget)?;
        if bins.len() > cfg.batch {
            let rest: Vec<usize> = bins[cfg.batch..]
                .iter()
                .flat_map(|b| b.sources.iter().map(|&s| chosen[s]))
                .collect();
            stream.push_front(&rest);
            bins.truncate(cfg.batch);
        }
        let batch = PackedBatch::concat(&bins);

        let mut g = Graph::new(&model.params);
        let losses = model
            .net
            .losses(&mut g, &batch, model.text.as_ref(), &cfg.loss, Reduction::Mean)?;
        let l_mlm = g.value(losses.mlm).item();
        let l_c = losses.contrastive.map(|v| g.value(v).item());
        let l_total = g.value(losses.total).item();
        let grads = g.backward(losses.total)?;
        let grad_norm = grads.global_norm();
        if !l_total.is_finite() || !grad_norm.is_finite() {
            let users: Vec<&str> = batch
                .sources
                .iter()
                .map(|&s| bundle.split.train[chosen[s]].user_id.as_str())
                .collect();
            let detail = format!(
                "l_mlm={l_mlm} l_c={l_c:?} grad_norm={grad_norm}; users {users:?}"
            );
            if let Some(dir) = out_dir {
                std::fs::write(dir.join("nonfinite_batch.json"), serde_json::to_vec(&batch)?)?;
            }
            return Err(Error::NonFinite { step, detail });
        }
        drop(g);
        adam_step(model.params.tensors_mut(), grads.tensors(), &mut state, &adam)?;

        let entry = StepLog {
            step,
            l_mlm,
            l_c,
            l_total,
            eff_batch: batch.n_sequences(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
        }
        if step % every == 0 || step == 1 {
            log::info!(
                "step {step}/{}: l_total {l_total:.4} l_mlm {l_mlm:.4} eff_batch {}",
                cfg.total_steps,
                entry.eff_batch
            );
        }
        log.push(entry);
        if let Some(dir) = out_dir {
            if step % every == 0 && step != cfg.total_steps {
                let path = dir.join("checkpoints").join(format!("step_{step:07}.ckpt"));
                let mut meta = meta_for(step)?;
                meta.text = provenance.clone();
                let sha256 = save_model(&path, &model, &meta)?;
                checkpoints.push(SavedCheckpoint { step, path, sha256 });
            }
        }
    }

    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        let mut meta = meta_for(cfg.total_steps)?;
        meta.text = provenance;
        let sha256 = save_model(&path, &model, &meta)?;
        checkpoints.push(SavedCheckpoint {
            step: cfg.total_steps,
            path,
            sha256,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_synthetic_corpus, SyntheticSpec};

    fn tiny(fusion: FusionMode) -> TrainConfig {
        let mut cfg = load_preset(match fusion {
            FusionMode::IdOnly => "desk-id",
            FusionMode::TextId => "desk-text_id",
            FusionMode::TextIdCritique => "desk-critique",
        })
        .unwrap();
        cfg.transformer.d_model = 16;
        cfg.transformer.d_hidden = 32;
        if let Some(p) = cfg.perceiver.as_mut() {
            p.d_model = 16;
        }
        cfg.text_encoder.d_text = 8;
        cfg.text_encoder.buckets = 256;
        cfg.total_steps = 5;
        cfg
    }

    #[test]
    fn runs_every_mode_and_logs() {
        let b = make_synthetic_corpus(&SyntheticSpec::category_driven(48, 30, 1)).unwrap();
        for mode in [FusionMode::IdOnly, FusionMode::TextId, FusionMode::TextIdCritique] {
            let out = train(&tiny(mode), &b, None).unwrap();
            assert_eq!(out.log.len(), 5);
            assert!(out.log.iter().all(|l| l.l_total.is_finite() && l.eff_batch > 0));
            assert_eq!(out.log[0].l_c.is_some(), mode.uses_text());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let b = make_synthetic_corpus(&SyntheticSpec::markov(20, 30, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny(FusionMode::TextId), &b, Some(dir.path())).unwrap();
        let (back, meta, sha) = load_model(&dir.path().join(FINAL_CHECKPOINT), &b).unwrap();
        assert_eq!(meta.step, 5);
        assert_eq!(sha, out.checkpoints.last().unwrap().sha256);
        assert_eq!(back.params.tensors(), out.model.params.tensors());
        let logged = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(logged.lines().count(), 5);
    }

    #[test]
    fn ablations_apply() {
        let mut cfg = tiny(FusionMode::TextId);
        for a in Ablation::ALL {
            a.apply(&mut cfg);
        }
        assert_eq!(cfg.fusion, FusionMode::IdOnly);
        assert_eq!(cfg.mask_mode, MaskMode::LastOnly);
        assert!(cfg.dedup && !cfg.loss.contrastive_enabled && cfg.perceiver.is_none());
    }

    #[test]
    fn default_checkpoint_interval() {
        let cfg = TrainConfig {
            total_steps: 5000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.checkpoint_interval(), 500);
        let cfg = TrainConfig {
            total_steps: 300,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.checkpoint_interval(), 100);
    }

    #[test]
    fn dedup_collapses_runs() {
        assert_eq!(dedup_consecutive(&[1, 1, 2, 1, 1]), vec![1, 2, 1]);
    }
}
