//! Finite-difference check of the full model's loss gradients on a toy
//! configuration.

use serde::{Deserialize, Serialize};

use super::{FlareConfig, FlareModel, FusionMode, LossConfig, Reduction};
use crate::data::{Item, MaskedSequence, PackedBatch};
use crate::error::Result;
use crate::nn::gradcheck::{grad_check, GradCheckReport};
use crate::nn::{Graph, ParamStore, PerceiverConfig, TransformerConfig};
use crate::train::{build_text_context, TextEncoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCheckConfig {
    pub mode: FusionMode,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub d_text: usize,
    pub loss: LossConfig,
}

impl Default for ToyCheckConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::TextIdCritique,
            seed: 11,
            eps: 1e-5,
            tolerance: 1e-4,
            d_text: 8,
            loss: LossConfig::default(),
        }
    }
}

pub const TOY_ITEMS: usize = 10;

pub fn toy_items() -> Vec<Item> {
    (0..TOY_ITEMS)
        .map(|i| Item {
            title: format!("toy item {i}"),
            categories: vec![
                "root".into(),
                format!("branch{}", i % 2),
                format!("twig{}", i % 4),
                format!("leaf{}", i % 5),
            ],
            has_metadata: true,
            ..Item::bare(format!("T{i}"), i)
        })
        .collect()
}

pub fn toy_model_config(mode: FusionMode, d_text: usize, seed: u64) -> FlareConfig {
    FlareConfig {
        n_items: TOY_ITEMS,
        mode,
        transformer: TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_hidden: 32,
            max_positions: 4,
        },
        perceiver: mode.uses_text().then_some(PerceiverConfig {
            n_latents: 2,
            n_heads: 2,
            n_layers: 1,
            d_model: 16,
        }),
        d_text,
        init_seed: seed,
    }
}

/// Three-item sequence with its middle item masked (carrying a critique).
pub fn toy_batch() -> PackedBatch {
    let mut seq = MaskedSequence::with_positions(&[1, 4, 7], &[1]);
    seq.critiques[1] = Some("root - branch0 - twig0".into());
    PackedBatch::single(&seq)
}

/// Runs the check over every parameter tensor of the toy model.
pub fn toy_grad_check(cfg: &ToyCheckConfig) -> Result<GradCheckReport> {
    let mc = toy_model_config(cfg.mode, cfg.d_text, cfg.seed);
    let text = if cfg.mode.uses_text() {
        let enc = TextEncoderConfig {
            d_text: cfg.d_text,
            buckets: 64,
            ..TextEncoderConfig::default()
        };
        Some(build_text_context(&enc, &toy_items())?)
    } else {
        None
    };
    let model = FlareModel::new(&mc, text)?;
    let batch = toy_batch();
    let loss_at = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let l = model
            .net
            .losses(&mut g, &batch, model.text.as_ref(), &cfg.loss, Reduction::Mean)?;
        Ok(g.value(l.total).item())
    };
    let analytic = {
        let mut g = Graph::new(&model.params);
        let l = model.net.losses(
            &mut g,
            &batch,
            model.text.as_ref(),
            &cfg.loss,
            Reduction::Mean,
        )?;
        g.backward(l.total)?.into_tensors()
    };
    grad_check(&model.params, &analytic, cfg.eps, cfg.tolerance, loss_at)
}
