//! Visual-grounded alignment decoder and the matching (VLM) head.

use ndarray::Array2;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{self, Ctx};
use crate::params::Init;
use crate::text::{self, Memory, TokenSequence};
use crate::visual::EncodedVisual;

pub fn init(init: &mut Init<'_, impl Rng>, cfg: &ModelConfig) {
    text::init_stack(init, cfg, "ad", cfg.decoder_depth, true);
    init.linear("ad.vlm_head", cfg.dim, 2, false);
}

#[derive(Clone, Copy, Debug)]
pub struct FusedRepresentation {
    /// `[B, L, D]`
    pub tokens: Var,
    /// Feature at the [ENC] position, `[B, D]`.
    pub enc_vec: Var,
}

/// Fuses text (with [ENC] at position 0) with an arbitrary memory.
pub fn fuse_memory(ctx: Ctx<'_>, cfg: &ModelConfig, text: &TokenSequence, memory: Memory<'_>) -> Result<FusedRepresentation> {
    let tokens = text::run_stack(ctx, cfg, "ad", cfg.decoder_depth, text, false, Some(memory))?;
    let g = ctx.g;
    let enc_vec = g.reshape(g.narrow(tokens, 1, 0, 1), &[text.batch_size(), cfg.dim]);
    Ok(FusedRepresentation { tokens, enc_vec })
}

/// Bidirectional self-attention over the text, cross-attention into every
/// visual token (CLS included), feed-forward; residual around each.
pub fn fuse(ctx: Ctx<'_>, cfg: &ModelConfig, text: &TokenSequence, visual: &EncodedVisual) -> Result<FusedRepresentation> {
    fuse_memory(
        ctx,
        cfg,
        text,
        Memory {
            tokens: visual.tokens,
            mask: None,
        },
    )
}

/// Two-way logits `[B, 2]`; class 1 means "matched".
pub fn vlm_logits(ctx: Ctx<'_>, fused: &FusedRepresentation) -> Result<Var> {
    nn::linear(ctx, "ad.vlm_head", fused.enc_vec)
}

/// Per-pair matching probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct VlmPrediction {
    pub p_vlm: Vec<f64>,
}

impl VlmPrediction {
    pub fn from_logits(logits: &Array2<f64>) -> Self {
        let p_vlm = logits.rows().into_iter().map(|r| matched_probability(r[0], r[1])).collect();
        Self { p_vlm }
    }
}

/// Softmax probability of class 1 for a pair of logits.
pub fn matched_probability(unmatched: f64, matched: f64) -> f64 {
    let m = unmatched.max(matched);
    let a = (unmatched - m).exp();
    let b = (matched - m).exp();
    b / (a + b)
}

pub fn vlm_head(ctx: Ctx<'_>, fused: &FusedRepresentation) -> Result<VlmPrediction> {
    let logits = vlm_logits(ctx, fused)?;
    Ok(VlmPrediction::from_logits(&to_array2(ctx.g, logits)))
}

pub(crate) fn to_array2(g: &Graph, v: Var) -> Array2<f64> {
    g.value(v).clone().into_dimensionality().expect("2-d array")
}
