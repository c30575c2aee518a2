//! Vocabulary, tokenization and the shared text transformer stack.
//!
//! The same stack backs the text encoder (bidirectional, no memory), the
//! alignment decoder (bidirectional, cross-attends to a memory) and the
//! generation decoder (causal, cross-attends to a memory).

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{self, Ctx};
use crate::params::Init;

/// Reserved tokens, in id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    Pad,
    Cls,
    Enc,
    Dec,
    Eos,
    Unk,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Pad,
        Special::Cls,
        Special::Enc,
        Special::Dec,
        Special::Eos,
        Special::Unk,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Special::Pad => "[PAD]",
            Special::Cls => "[CLS]",
            Special::Enc => "[ENC]",
            Special::Dec => "[DEC]",
            Special::Eos => "[EOS]",
            Special::Unk => "[UNK]",
        }
    }
}

/// Closed word-level vocabulary. Line `i` of the vocabulary file is token `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    specials: [usize; 6],
}

/// Lowercases and splits on whitespace, trimming surrounding punctuation.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let mut specials = [0; 6];
        for (slot, sp) in specials.iter_mut().zip(Special::ALL) {
            *slot = *index
                .get(sp.token())
                .ok_or_else(|| Error::Config(format!("vocabulary lacks special token {}", sp.token())))?;
        }
        Ok(Self {
            tokens,
            index,
            specials,
        })
    }

    /// Special tokens followed by the sorted distinct words of `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab: Vec<String> = texts.into_iter().flat_map(|t| words(t).collect::<Vec<_>>()).collect();
        vocab.sort();
        vocab.dedup();
        let tokens = Special::ALL
            .iter()
            .map(|s| s.token().to_string())
            .chain(vocab.into_iter().filter(|w| !Special::ALL.iter().any(|s| s.token() == w)))
            .collect();
        Self::from_tokens(tokens).expect("specials are present and distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, special: Special) -> usize {
        self.specials[special as usize]
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.id(Special::Unk))
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.specials.contains(&id)
    }

    /// Word ids of `text` without any special tokens.
    pub fn word_ids(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.lookup(&w)).collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !self.is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }
}

/// Token ids `[B, L]` and the matching real-token mask (1 = real).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Array2<usize>,
    pub mask: Array2<u8>,
}

impl TokenSequence {
    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn len(&self) -> usize {
        self.ids.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.ncols() == 0
    }

    pub fn stack(rows: &[TokenSequence]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero token sequences".into()))?;
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(Error::Argument("token sequences differ in length".into()));
        }
        let ids: Vec<_> = rows.iter().map(|r| r.ids.view()).collect();
        let mask: Vec<_> = rows.iter().map(|r| r.mask.view()).collect();
        Ok(Self {
            ids: ndarray::concatenate(Axis(0), &ids).expect("equal widths"),
            mask: ndarray::concatenate(Axis(0), &mask).expect("equal widths"),
        })
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: self.ids.select(Axis(0), rows),
            mask: self.mask.select(Axis(0), rows),
        }
    }

    /// Copy with position 0 replaced by `id` (e.g. [ENC] for alignment).
    pub fn with_start(&self, id: usize) -> Self {
        let mut out = self.clone();
        out.ids.column_mut(0).fill(id);
        out.mask.column_mut(0).fill(1);
        out
    }
}

/// Encodes one text: `start` token, words, optional [EOS], padded to `len`.
/// Truncation keeps the [EOS] when requested.
pub fn encode_ids(vocab: &Vocabulary, text: &str, start: Special, eos: bool, len: usize) -> Result<TokenSequence> {
    if vocab.is_empty() {
        return Err(Error::Config("vocabulary is empty".into()));
    }
    if len < 2 {
        return Err(Error::Argument(format!("sequence length must be at least 2, got {len}")));
    }
    let mut ids = vec![vocab.id(start)];
    let budget = len - 1 - usize::from(eos);
    ids.extend(vocab.word_ids(text).into_iter().take(budget));
    if eos {
        ids.push(vocab.id(Special::Eos));
    }
    let real = ids.len();
    ids.resize(len, vocab.id(Special::Pad));
    let mask = (0..len).map(|i| u8::from(i < real)).collect();
    Ok(TokenSequence {
        ids: Array2::from_shape_vec((1, len), ids).expect("row"),
        mask: Array2::from_shape_vec((1, len), mask).expect("row"),
    })
}

/// `[CLS]` + words, truncated to `len` and padded with `[PAD]`.
pub fn tokenize_text(text: &str, vocab: &Vocabulary, len: usize) -> Result<TokenSequence> {
    encode_ids(vocab, text, Special::Cls, false, len)
}

pub fn tokenize_batch<S: AsRef<str>>(
    texts: &[S],
    vocab: &Vocabulary,
    start: Special,
    eos: bool,
    len: usize,
) -> Result<TokenSequence> {
    let rows = texts
        .iter()
        .map(|t| encode_ids(vocab, t.as_ref(), start, eos, len))
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::stack(&rows)
}

/// Parameters of a text stack under `prefix`; `cross` adds cross-attention
/// sublayers with zero-initialised output projections.
pub fn init_stack(init: &mut Init<'_, impl Rng>, cfg: &ModelConfig, prefix: &str, depth: usize, cross: bool) {
    let d = cfg.dim;
    init.normal(&format!("{prefix}.tok_emb"), &[cfg.vocab_size, d], 0.02);
    init.normal(&format!("{prefix}.pos_emb"), &[cfg.max_text_len, d], 0.02);
    init.layer_norm(&format!("{prefix}.emb_ln"), d);
    for i in 0..depth {
        let b = format!("{prefix}.blocks.{i}");
        init.layer_norm(&format!("{b}.self.ln"), d);
        init.attention(&format!("{b}.self.attn"), d, false);
        if cross {
            init.layer_norm(&format!("{b}.cross.ln"), d);
            init.attention(&format!("{b}.cross.attn"), d, true);
        }
        init.layer_norm(&format!("{b}.mlp.ln"), d);
        init.mlp(&format!("{b}.mlp"), d, d * cfg.mlp_ratio);
    }
    init.layer_norm(&format!("{prefix}.norm"), d);
}

pub fn init(init: &mut Init<'_, impl Rng>, cfg: &ModelConfig) {
    init_stack(init, cfg, "te", cfg.text_depth, false);
}

/// Cross-attention memory: tokens `[B, Lm, D]` plus an optional key mask.
#[derive(Clone, Copy)]
pub struct Memory<'m> {
    pub tokens: Var,
    pub mask: Option<&'m Array2<u8>>,
}

/// Runs a text stack. Returns final-norm token features `[B, L, D]`.
pub fn run_stack(
    ctx: Ctx<'_>,
    cfg: &ModelConfig,
    prefix: &str,
    depth: usize,
    seq: &TokenSequence,
    causal: bool,
    memory: Option<Memory<'_>>,
) -> Result<Var> {
    let g = ctx.g;
    let (b, l) = seq.ids.dim();
    let d = cfg.dim;
    if l > cfg.max_text_len {
        return Err(Error::Argument(format!(
            "sequence length {l} exceeds the configured maximum {}",
            cfg.max_text_len
        )));
    }
    if let Some(m) = &memory {
        let mb = g.shape(m.tokens)[0];
        if mb != b {
            return Err(Error::Argument(format!("batch mismatch: {b} text rows vs {mb} visual rows")));
        }
    }
    for ((row, pos), &id) in seq.ids.indexed_iter() {
        if id >= cfg.vocab_size {
            return Err(Error::Argument(format!(
                "token id {id} at position ({row}, {pos}) is outside the vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }

    let flat: Vec<usize> = seq.ids.iter().copied().collect();
    let emb = g.reshape(g.index_select(ctx.p(&format!("{prefix}.tok_emb"))?, 0, &flat), &[b, l, d]);
    let pos = g.narrow(ctx.p(&format!("{prefix}.pos_emb"))?, 0, 0, l);
    let mut x = nn::layer_norm(ctx, &format!("{prefix}.emb_ln"), g.add(emb, pos))?;

    let self_bias = if causal {
        g.constant(nn::causal_bias(Some(&seq.mask), l))
    } else {
        g.constant(nn::key_padding_bias(&seq.mask))
    };
    let cross_bias = memory.and_then(|m| m.mask).map(|m| g.constant(nn::key_padding_bias(m)));

    for i in 0..depth {
        let blk = format!("{prefix}.blocks.{i}");
        let h = nn::layer_norm(ctx, &format!("{blk}.self.ln"), x)?;
        let a = nn::attention(ctx, &format!("{blk}.self.attn"), h, h, Some(self_bias), cfg.heads)?;
        x = g.add(x, a);
        if let Some(m) = &memory {
            let h = nn::layer_norm(ctx, &format!("{blk}.cross.ln"), x)?;
            let a = nn::attention(ctx, &format!("{blk}.cross.attn"), h, m.tokens, cross_bias, cfg.heads)?;
            x = g.add(x, a);
        }
        let h = nn::layer_norm(ctx, &format!("{blk}.mlp.ln"), x)?;
        let m = nn::mlp(ctx, &format!("{blk}.mlp"), h)?;
        x = g.add(x, m);
        nn::check_finite(g, x, prefix_stage(prefix), i)?;
    }
    nn::layer_norm(ctx, &format!("{prefix}.norm"), x)
}

fn prefix_stage(prefix: &str) -> &'static str {
    match prefix {
        "te" => "text encoder",
        "ad" => "alignment decoder",
        "gd" => "generation decoder",
        _ => "text stack",
    }
}

/// Text encoder forward: token features `[B, L, D]` and `w_cls` `[B, D]`.
pub fn encode_text(ctx: Ctx<'_>, cfg: &ModelConfig, seq: &TokenSequence) -> Result<(Var, Var)> {
    let tokens = run_stack(ctx, cfg, "te", cfg.text_depth, seq, false, None)?;
    let g = ctx.g;
    let b = seq.batch_size();
    let cls = g.reshape(g.narrow(tokens, 1, 0, 1), &[b, cfg.dim]);
    Ok((tokens, cls))
}
