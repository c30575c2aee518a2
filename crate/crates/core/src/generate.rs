//! Visual-grounded generation decoder: causal text stack with
//! cross-attention, the LM head, and greedy / beam decoding.

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::Rng;

use crate::align;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Ctx};
use crate::params::{Init, ParamStore};
use crate::text::{self, encode_ids, Memory, Special, TokenSequence, Vocabulary};
use crate::visual::EncodedVisual;

pub fn init(init: &mut Init<'_, impl Rng>, cfg: &ModelConfig) {
    text::init_stack(init, cfg, "gd", cfg.decoder_depth, true);
    init.linear("gd.lm_head", cfg.dim, cfg.vocab_size, false);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    /// Total token budget, counting [DEC] and the prefix.
    pub max_len: usize,
    pub strategy: Strategy,
    pub prefix: String,
}

impl GenerationConfig {
    pub fn greedy(max_len: usize, prefix: impl Into<String>) -> Self {
        Self {
            max_len,
            strategy: Strategy::Greedy,
            prefix: prefix.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 1 {
            return Err(Error::Argument("max_len must be at least 1".into()));
        }
        if let Strategy::Beam(0) = self.strategy {
            return Err(Error::Argument("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Detokenized output. `truncated` is set when the budget ran out before
/// [EOS].
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub text: String,
    pub ids: Vec<usize>,
    pub truncated: bool,
}

/// Owned cross-attention memory for one sample: `[1, Lm, D]` and an
/// optional key mask `[1, Lm]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryArrays {
    pub tokens: Array3<f64>,
    pub mask: Option<Array2<u8>>,
}

impl MemoryArrays {
    pub fn from_visual(g: &Graph, visual: &EncodedVisual) -> Vec<Self> {
        split_rows(&visual.tokens_array(g), None)
    }
}

pub(crate) fn split_rows(tokens: &Array3<f64>, mask: Option<&Array2<u8>>) -> Vec<MemoryArrays> {
    (0..tokens.shape()[0])
        .map(|i| MemoryArrays {
            tokens: tokens.index_axis(Axis(0), i).insert_axis(Axis(0)).to_owned(),
            mask: mask.map(|m| m.row(i).insert_axis(Axis(0)).to_owned()),
        })
        .collect()
}

/// Causal self-attention, cross-attention into the memory, FFN; then the LM
/// head. `text` carries [DEC] at position 0. Returns `[B, L, |V|]`.
pub fn decode_memory(ctx: Ctx<'_>, cfg: &ModelConfig, text: &TokenSequence, memory: Memory<'_>) -> Result<Var> {
    let h = text::run_stack(ctx, cfg, "gd", cfg.decoder_depth, text, true, Some(memory))?;
    nn::linear(ctx, "gd.lm_head", h)
}

pub fn decode_logits(ctx: Ctx<'_>, cfg: &ModelConfig, text: &TokenSequence, visual: &EncodedVisual) -> Result<Var> {
    decode_memory(
        ctx,
        cfg,
        text,
        Memory {
            tokens: visual.tokens,
            mask: None,
        },
    )
}

/// QA memory: visual tokens followed by the question fused through the
/// alignment decoder (question carries [ENC] at position 0). Returns the
/// memory tokens and its key mask.
pub fn qa_memory(
    ctx: Ctx<'_>,
    cfg: &ModelConfig,
    visual: &EncodedVisual,
    question: &TokenSequence,
) -> Result<(Var, Array2<u8>)> {
    let g = ctx.g;
    let fused = align::fuse(ctx, cfg, question, visual)?;
    let tokens = g.concat(&[visual.tokens, fused.tokens], 1);
    let b = question.batch_size();
    let vis_len = visual.token_count();
    let mut mask = Array2::<u8>::ones((b, vis_len + question.len()));
    mask.slice_mut(ndarray::s![.., vis_len..]).assign(&question.mask);
    Ok((tokens, mask))
}

fn last_logits(params: &ParamStore, cfg: &ModelConfig, ids: &[usize], memory: &MemoryArrays) -> Result<Vec<f64>> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, params);
    let seq = TokenSequence {
        ids: Array2::from_shape_vec((1, ids.len()), ids.to_vec()).expect("row"),
        mask: Array2::ones((1, ids.len())),
    };
    let mem = g.constant(memory.tokens.clone().into_dyn());
    let logits = decode_memory(
        ctx,
        cfg,
        &seq,
        Memory {
            tokens: mem,
            mask: memory.mask.as_ref(),
        },
    )?;
    let v = g.value(logits);
    Ok(v.index_axis(Axis(1), ids.len() - 1).iter().copied().collect())
}

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn seed_ids(vocab: &Vocabulary, prefix: &str) -> Vec<usize> {
    std::iter::once(vocab.id(Special::Dec)).chain(vocab.word_ids(prefix)).collect()
}

fn finish(vocab: &Vocabulary, ids: Vec<usize>, truncated: bool) -> Generated {
    Generated {
        text: vocab.detokenize(&ids),
        ids,
        truncated,
    }
}

/// Decodes one sample from its cross-attention memory.
pub fn generate_from_memory(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    memory: &MemoryArrays,
    gen: &GenerationConfig,
) -> Result<Generated> {
    gen.validate()?;
    if gen.max_len > cfg.max_text_len {
        return Err(Error::Argument(format!(
            "max_len {} exceeds the decoder's position table ({})",
            gen.max_len, cfg.max_text_len
        )));
    }
    let eos = vocab.id(Special::Eos);
    let mut ids = seed_ids(vocab, &gen.prefix);
    ids.truncate(gen.max_len.max(1));
    match gen.strategy {
        Strategy::Greedy => {
            while ids.len() < gen.max_len {
                let next = argmax(&last_logits(params, cfg, &ids, memory)?);
                ids.push(next);
                if next == eos {
                    return Ok(finish(vocab, ids, false));
                }
            }
            Ok(finish(vocab, ids, true))
        }
        Strategy::Beam(width) => beam_search(params, cfg, vocab, memory, ids, gen.max_len, width),
    }
}

/// Sum-of-log-probability beam search. Ties break toward the earlier beam
/// and the lower token id, so width 1 reproduces greedy decoding.
fn beam_search(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    memory: &MemoryArrays,
    seed: Vec<usize>,
    max_len: usize,
    width: usize,
) -> Result<Generated> {
    let eos = vocab.id(Special::Eos);
    let mut live: Vec<(Vec<usize>, f64)> = vec![(seed, 0.0)];
    let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
    while !live.is_empty() && live[0].0.len() < max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, (ids, score)) in live.iter().enumerate() {
            let lp = log_softmax(&last_logits(params, cfg, ids, memory)?);
            cands.extend(lp.iter().enumerate().map(|(tok, l)| (score + l, bi, tok)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(width);
        for &(score, bi, tok) in cands.iter().take(width) {
            let mut ids = live[bi].0.clone();
            ids.push(tok);
            if tok == eos {
                done.push((ids, score));
            } else {
                next.push((ids, score));
            }
        }
        live = next;
        let best_done = done.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
        if live.iter().all(|l| l.1 <= best_done) {
            live.clear();
        }
    }
    let pick = |v: &[(Vec<usize>, f64)]| {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(_, x)| x.0.clone())
    };
    match pick(&done) {
        Some(ids) => Ok(finish(vocab, ids, false)),
        None => Ok(finish(vocab, pick(&live).expect("at least one beam"), true)),
    }
}

/// Generates one text per visual in the batch.
pub fn generate(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    g: &Graph,
    visual: &EncodedVisual,
    gen: &GenerationConfig,
) -> Result<Vec<Generated>> {
    MemoryArrays::from_visual(g, visual)
        .iter()
        .map(|m| generate_from_memory(params, cfg, vocab, m, gen))
        .collect()
}

/// Answers questions about the visuals: the question runs through the
/// alignment decoder and the generation decoder attends to
/// `[visual tokens ; fused question tokens]`.
pub fn qa_forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    g: &Graph,
    visual: &EncodedVisual,
    questions: &[String],
    gen: &GenerationConfig,
) -> Result<Vec<Generated>> {
    if questions.iter().any(|q| text::words(q).next().is_none()) {
        return Err(Error::Argument("question is empty".into()));
    }
    let q = text::tokenize_batch(questions, vocab, Special::Enc, false, cfg.max_text_len)?;
    let ctx = Ctx::new(g, params);
    let (mem, mask) = qa_memory(ctx, cfg, visual, &q)?;
    let tokens: Array3<f64> = g.value(mem).clone().into_dimensionality().expect("3-d memory");
    split_rows(&tokens, Some(&mask))
        .iter()
        .map(|m| generate_from_memory(params, cfg, vocab, m, gen))
        .collect()
}

/// `[DEC] words [EOS]` targets padded to the configured length.
pub fn lm_targets<S: AsRef<str>>(vocab: &Vocabulary, cfg: &ModelConfig, texts: &[S]) -> Result<TokenSequence> {
    let rows = texts
        .iter()
        .map(|t| encode_ids(vocab, t.as_ref(), Special::Dec, true, cfg.max_text_len))
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::stack(&rows)
}

/// Convenience for tests and benches: logits as an owned array.
pub fn logits_array(g: &Graph, v: Var) -> ArrayD<f64> {
    g.value(v).clone()
}
