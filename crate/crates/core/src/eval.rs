//! Downstream evaluation: two-stage retrieval, frozen-feature linear
//! probing, captioning BLEU-4, question answering, and the paradigm
//! ablation table.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::{Corpus, Modality, QaPair};
use crate::error::{Error, Result};
use crate::generate::{self, GenerationConfig, MemoryArrays};
use crate::graph::{Graph, Var};
use crate::model;
use crate::nn::Ctx;
use crate::objectives::{self, Label};
use crate::params::ParamStore;
use crate::text::{self, Memory, Special, Vocabulary};
use crate::trainer::{derive_seed, AdamW, Paradigm, TrainConfig, Trainer};
use crate::visual::{self, VisualBatch};

const CHUNK: usize = 32;

/// Encoder outputs for a list of visuals.
#[derive(Clone, Debug)]
pub struct VisualFeatures {
    /// Per item `[N, D]` encoder tokens (CLS first).
    pub tokens: Vec<Array2<f64>>,
    /// `[n, D]` pooled CLS features.
    pub cls: Array2<f64>,
    /// `[n, d_proj]` unit-norm projections.
    pub embed: Array2<f64>,
}

/// Runs consecutive same-shape items through the encoder in chunks.
pub fn encode_visuals(params: &ParamStore, cfg: &ModelConfig, visuals: &[&Array4<f64>]) -> Result<VisualFeatures> {
    let mut tokens = Vec::with_capacity(visuals.len());
    let mut cls_rows = Vec::with_capacity(visuals.len());
    let mut emb_rows = Vec::with_capacity(visuals.len());
    let mut start = 0;
    while start < visuals.len() {
        let mut end = start + 1;
        while end < visuals.len() && end - start < CHUNK && visuals[end].shape() == visuals[start].shape() {
            end += 1;
        }
        let batch = VisualBatch::stack(&visuals[start..end])?;
        let g = Graph::inference();
        let ctx = Ctx::new(&g, params);
        let (enc, v) = model::embed_visual(ctx, cfg, &batch)?;
        let toks = enc.tokens_array(&g);
        tokens.extend(toks.outer_iter().map(|t| t.to_owned()));
        cls_rows.extend(enc.cls_array(&g).outer_iter().map(|r| r.to_owned()));
        emb_rows.extend(to2(&g, v).outer_iter().map(|r| r.to_owned()));
        start = end;
    }
    Ok(VisualFeatures {
        tokens,
        cls: stack_rows(&cls_rows, cfg.dim),
        embed: stack_rows(&emb_rows, cfg.proj_dim),
    })
}

/// `[n, d_proj]` unit-norm text projections.
pub fn encode_texts<S: AsRef<str>>(params: &ParamStore, cfg: &ModelConfig, vocab: &Vocabulary, texts: &[S]) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(CHUNK) {
        let seq = text::tokenize_batch(chunk, vocab, Special::Cls, false, cfg.max_text_len)?;
        let g = Graph::inference();
        let w = model::embed_text(Ctx::new(&g, params), cfg, &seq)?;
        rows.extend(to2(&g, w).outer_iter().map(|r| r.to_owned()));
    }
    Ok(stack_rows(&rows, cfg.proj_dim))
}

fn to2(g: &Graph, v: Var) -> Array2<f64> {
    g.value(v).clone().into_dimensionality().expect("2-d")
}

fn stack_rows(rows: &[Array1<f64>], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

/// Matching probabilities for `(text, visual)` index pairs, batched by
/// visual token count.
pub fn match_scores(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    texts: &[String],
    feats: &VisualFeatures,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; pairs.len()];
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &(_, vi)) in pairs.iter().enumerate() {
        by_len.entry(feats.tokens[vi].nrows()).or_default().push(k);
    }
    for (len, members) in by_len {
        for chunk in members.chunks(CHUNK) {
            let mut mem = Array3::zeros((chunk.len(), len, cfg.dim));
            let mut chunk_texts = Vec::with_capacity(chunk.len());
            for (r, &k) in chunk.iter().enumerate() {
                let (ti, vi) = pairs[k];
                mem.index_axis_mut(Axis(0), r).assign(&feats.tokens[vi]);
                chunk_texts.push(texts[ti].as_str());
            }
            let seq = text::tokenize_batch(&chunk_texts, vocab, Special::Enc, false, cfg.max_text_len)?;
            let g = Graph::inference();
            let ctx = Ctx::new(&g, params);
            let memory = Memory {
                tokens: g.constant(mem.into_dyn()),
                mask: None,
            };
            let fused = crate::align::fuse_memory(ctx, cfg, &seq, memory)?;
            let p = crate::align::vlm_head(ctx, &fused)?.p_vlm;
            for (r, &k) in chunk.iter().enumerate() {
                out[k] = p[r];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Gallery order for every query and the resulting recall.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub order: Vec<Vec<usize>>,
    pub recall: Recall,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    /// Text queries over the visual gallery.
    pub t2v: Ranking,
    /// Visual queries over the text gallery.
    pub v2t: Ranking,
}

impl RetrievalReport {
    /// Mean R@1 of the two directions.
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.t2v.recall.r1 + self.v2t.recall.r1)
    }
}

/// Fraction of queries with a relevant item among the first `k`.
pub fn recall_at(order: &[Vec<usize>], query_labels: &[Label], item_labels: &[Label], k: usize) -> f64 {
    if order.is_empty() {
        return 0.0;
    }
    let hits = order
        .iter()
        .zip(query_labels)
        .filter(|(o, q)| o.iter().take(k).any(|&i| item_labels[i] == **q))
        .count();
    hits as f64 / order.len() as f64
}

fn recall(order: &[Vec<usize>], q: &[Label], items: &[Label]) -> Recall {
    Recall {
        r1: recall_at(order, q, items, 1),
        r5: recall_at(order, q, items, 5),
        r10: recall_at(order, q, items, 10),
    }
}

/// Indices sorted by descending score, ties by index.
fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Stage-one cosine ranking only (no re-ranking).
pub fn cosine_order(queries: &Array2<f64>, gallery: &Array2<f64>) -> Vec<Vec<usize>> {
    let sims = queries.dot(&gallery.t());
    sims.outer_iter().map(|r| argsort_desc(r.as_slice().expect("contiguous"))).collect()
}

/// Re-ranks the top `k` of each stage-one list by `score(query, item)`;
/// the remainder keeps its stage-one order.
fn rerank(stage1: Vec<Vec<usize>>, k: usize, scores: &HashMap<(usize, usize), f64>) -> Vec<Vec<usize>> {
    stage1
        .into_iter()
        .enumerate()
        .map(|(q, order)| {
            let cut = k.min(order.len());
            let mut head = order[..cut].to_vec();
            head.sort_by(|&a, &b| scores[&(q, b)].total_cmp(&scores[&(q, a)]).then(a.cmp(&b)));
            head.extend_from_slice(&order[cut..]);
            head
        })
        .collect()
}

/// Two-stage retrieval: cosine shortlist of size `k`, then re-ranking by
/// the matching probability. Relevance is label equality.
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    visuals: &[&Array4<f64>],
    visual_labels: &[Label],
    texts: &[String],
    text_labels: &[Label],
    k: usize,
) -> Result<RetrievalReport> {
    if k == 0 {
        return Err(Error::Argument("shortlist size k must be positive".into()));
    }
    if visuals.is_empty() || texts.is_empty() {
        return Err(Error::Argument("retrieval needs a non-empty gallery".into()));
    }
    let feats = encode_visuals(params, cfg, visuals)?;
    let w = encode_texts(params, cfg, vocab, texts)?;

    let t2v_1 = cosine_order(&w, &feats.embed);
    let v2t_1 = cosine_order(&feats.embed, &w);
    let mut wanted: Vec<(usize, usize)> = Vec::new();
    for (q, o) in t2v_1.iter().enumerate() {
        wanted.extend(o.iter().take(k).map(|&vi| (q, vi)));
    }
    for (q, o) in v2t_1.iter().enumerate() {
        wanted.extend(o.iter().take(k).map(|&ti| (ti, q)));
    }
    wanted.sort_unstable();
    wanted.dedup();
    let p = match_scores(params, cfg, vocab, texts, &feats, &wanted)?;
    let mut t2v_s = HashMap::new();
    let mut v2t_s = HashMap::new();
    for (&(ti, vi), &s) in wanted.iter().zip(&p) {
        t2v_s.insert((ti, vi), s);
        v2t_s.insert((vi, ti), s);
    }
    let t2v = rerank(t2v_1, k, &t2v_s);
    let v2t = rerank(v2t_1, k, &v2t_s);
    Ok(RetrievalReport {
        t2v: Ranking {
            recall: recall(&t2v, text_labels, visual_labels),
            order: t2v,
        },
        v2t: Ranking {
            recall: recall(&v2t, visual_labels, text_labels),
            order: v2t,
        },
    })
}

/// Retrieval over a corpus: every visual against its distinct texts.
pub fn retrieve_corpus(params: &ParamStore, cfg: &ModelConfig, vocab: &Vocabulary, corpus: &Corpus, k: usize) -> Result<RetrievalReport> {
    let visuals: Vec<_> = corpus.triplets.iter().map(|t| &t.visual).collect();
    let vlabels: Vec<Label> = corpus.triplets.iter().map(|t| t.label).collect();
    let mut texts = Vec::new();
    let mut tlabels = Vec::new();
    for t in &corpus.triplets {
        if !texts.contains(&t.text) {
            texts.push(t.text.clone());
            tlabels.push(t.label);
        }
    }
    retrieve(params, cfg, vocab, &visuals, &vlabels, &texts, &tlabels, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub classes: usize,
}

/// Pooled CLS features of the frozen visual encoder.
pub fn extract_features(params: &ParamStore, cfg: &ModelConfig, visuals: &[&Array4<f64>]) -> Result<Array2<f64>> {
    Ok(encode_visuals(params, cfg, visuals)?.cls)
}

/// Dense class indices in order of first appearance.
pub fn class_indices<T: Eq + std::hash::Hash + Clone>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let idx = labels
        .iter()
        .map(|l| {
            let n = map.len();
            *map.entry(l.clone()).or_insert(n)
        })
        .collect();
    (idx, map.len())
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row /= s;
    }
}

fn accuracy(x: &Array2<f64>, y: &[usize], w: &Array2<f64>, b: &Array1<f64>) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let z = x.dot(w) + b;
    let right = z
        .outer_iter()
        .zip(y)
        .filter(|(r, &c)| argsort_desc(&r.to_vec())[0] == c)
        .count();
    right as f64 / y.len() as f64
}

/// Softmax regression on standardised features by full-batch gradient
/// descent. Labels are dense indices `0..classes`.
pub fn linear_probe(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::Argument("linear probe needs at least two classes".into()));
    }
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() || train_x.ncols() != test_x.ncols() {
        return Err(Error::Argument("probe features and labels disagree in size".into()));
    }
    let mean = train_x.mean_axis(Axis(0)).expect("non-empty");
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
    let xs = (train_x - &mean) / &std;
    let xt = (test_x - &mean) / &std;
    let (n, d) = xs.dim();
    let mut onehot = Array2::zeros((n, classes));
    for (i, &c) in train_y.iter().enumerate() {
        onehot[[i, c]] = 1.0;
    }
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    for _ in 0..cfg.steps {
        let mut p = xs.dot(&w) + &b;
        softmax_rows(&mut p);
        let err = (p - &onehot) / n as f64;
        let gw = xs.t().dot(&err) + &(&w * cfg.l2);
        let gb = err.sum_axis(Axis(0));
        w = w - gw * cfg.lr;
        b = b - gb * cfg.lr;
    }
    Ok(ProbeResult {
        train_accuracy: accuracy(&xs, train_y, &w, &b),
        test_accuracy: accuracy(&xt, test_y, &w, &b),
        classes,
    })
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for win in tokens.windows(n) {
            *m.entry(win).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with uniform weights and the brevity penalty.
/// Each candidate may have several references.
pub fn bleu4<S: AsRef<str>>(candidates: &[S], references: &[Vec<S>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Argument("one reference list per candidate is required".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, refs) in candidates.iter().zip(references) {
        let c: Vec<String> = text::words(c.as_ref()).collect();
        let refs: Vec<Vec<String>> = refs.iter().map(|r| text::words(r.as_ref()).collect()).collect();
        if refs.is_empty() {
            return Err(Error::Argument("empty reference list".into()));
        }
        cand_len += c.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| ((r as isize - c.len() as isize).abs(), r))
            .expect("non-empty");
        for n in 1..=4 {
            let cg = ngrams(&c, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &refs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cg {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Generated captions for every triplet and BLEU-4 against the texts
/// sharing its label.
pub fn caption_corpus(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &Corpus,
    gen: &GenerationConfig,
) -> Result<(f64, Vec<String>)> {
    let visuals: Vec<_> = corpus.triplets.iter().map(|t| &t.visual).collect();
    let feats = encode_visuals(params, cfg, &visuals)?;
    let mut outputs = Vec::with_capacity(corpus.len());
    for toks in &feats.tokens {
        let mem = MemoryArrays {
            tokens: toks.clone().insert_axis(Axis(0)),
            mask: None,
        };
        outputs.push(generate::generate_from_memory(params, cfg, vocab, &mem, gen)?.text);
    }
    let mut by_label: HashMap<Label, Vec<String>> = HashMap::new();
    for t in &corpus.triplets {
        let refs = by_label.entry(t.label).or_default();
        if !refs.contains(&t.text) {
            refs.push(t.text.clone());
        }
    }
    let refs: Vec<Vec<String>> = corpus.triplets.iter().map(|t| by_label[&t.label].clone()).collect();
    Ok((bleu4(&outputs, &refs)?, outputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            lr: 1e-4,
            batch: 8,
            seed: 0,
        }
    }
}

/// Teacher-forced answer loss with the question-conditioned memory.
pub fn qa_loss<S: AsRef<str>>(
    ctx: Ctx<'_>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    batch: &VisualBatch,
    questions: &[S],
    answers: &[S],
) -> Result<Var> {
    let vis = visual::encode(ctx, cfg, batch)?;
    let q = text::tokenize_batch(questions, vocab, Special::Enc, false, cfg.max_text_len)?;
    let (mem, mask) = generate::qa_memory(ctx, cfg, &vis, &q)?;
    let target = generate::lm_targets(vocab, cfg, answers)?;
    objectives::lm_loss_memory(
        ctx,
        cfg,
        Memory {
            tokens: mem,
            mask: Some(&mask),
        },
        &target,
        vocab.id(Special::Eos),
    )
}

/// Fine-tunes every parameter on QA pairs with constant-rate AdamW.
/// Batches are drawn from one modality at a time.
pub fn finetune_qa(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &Corpus,
    pairs: &[QaPair],
    qa: &QaConfig,
) -> Result<ParamStore> {
    let mut params = params.clone();
    if pairs.is_empty() || qa.steps == 0 {
        return Ok(params);
    }
    let mut pools: BTreeMap<Modality, Vec<usize>> = BTreeMap::new();
    for (k, p) in pairs.iter().enumerate() {
        pools.entry(corpus.triplets[p.index].modality).or_default().push(k);
    }
    let pools: Vec<Vec<usize>> = pools.into_values().collect();
    let mut opt = AdamW::new(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(qa.seed, &[7]));
    for step in 0..qa.steps {
        let pool = &pools[step % pools.len()];
        let chosen: Vec<usize> = pool.choose_multiple(&mut rng, qa.batch.min(pool.len())).copied().collect();
        let visuals: Vec<_> = chosen.iter().map(|&k| &corpus.triplets[pairs[k].index].visual).collect();
        let batch = VisualBatch::stack(&visuals)?;
        let questions: Vec<&str> = chosen.iter().map(|&k| pairs[k].question.as_str()).collect();
        let answers: Vec<&str> = chosen.iter().map(|&k| pairs[k].answer.as_str()).collect();
        let g = Graph::new();
        let loss = qa_loss(Ctx::new(&g, &params), cfg, vocab, &batch, &questions, &answers)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        drop(grads);
        drop(g);
        opt.step(&mut params, &pg, qa.lr)?;
    }
    Ok(params)
}

fn normalise(s: &str) -> String {
    text::words(s).collect::<Vec<_>>().join(" ")
}

/// Exact-match accuracy of generated answers.
pub fn qa_accuracy(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &Corpus,
    pairs: &[QaPair],
    gen: &GenerationConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("no QA pairs to evaluate".into()));
    }
    let mut right = 0;
    for p in pairs {
        let g = Graph::inference();
        let batch = VisualBatch::stack(&[&corpus.triplets[p.index].visual])?;
        let vis = visual::encode(Ctx::new(&g, params), cfg, &batch)?;
        let out = generate::qa_forward(params, cfg, vocab, &g, &vis, std::slice::from_ref(&p.question), gen)?;
        if normalise(&out[0].text) == normalise(&p.answer) {
            right += 1;
        }
    }
    Ok(right as f64 / pairs.len() as f64)
}

/// Scores of one pretrained model on held-out data. Image entries are
/// absent for models that never saw images, and likewise for video.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub paradigm: String,
    pub img_tr1: Option<f64>,
    pub img_ir1: Option<f64>,
    pub vid_tr1: Option<f64>,
    pub vid_ir1: Option<f64>,
    pub cap_b4: Option<f64>,
    pub img_qa: Option<f64>,
    pub vid_qa: Option<f64>,
}

impl AblationRow {
    /// Mean image-retrieval R@1 over both directions.
    pub fn image_r1(&self) -> Option<f64> {
        Some(0.5 * (self.img_tr1? + self.img_ir1?))
    }

    pub fn video_r1(&self) -> Option<f64> {
        Some(0.5 * (self.vid_tr1? + self.vid_ir1?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl AblationTable {
    pub fn row(&self, paradigm: Paradigm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.paradigm == paradigm.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("| paradigm | img TR@1 | img IR@1 | vid IR@1 | cap B@4 | img QA | vid QA |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                r.paradigm,
                cell(r.img_tr1),
                cell(r.img_ir1),
                cell(r.vid_ir1),
                cell(r.cap_b4),
                cell(r.img_qa),
                cell(r.vid_qa)
            ));
        }
        s
    }

    /// Comma-separated values for plotting; missing entries are empty.
    pub fn to_csv(&self) -> String {
        let f = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v}"));
        let mut s = String::from("paradigm,img_tr1,img_ir1,vid_tr1,vid_ir1,cap_b4,img_qa,vid_qa\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.paradigm,
                f(r.img_tr1),
                f(r.img_ir1),
                f(r.vid_tr1),
                f(r.vid_ir1),
                f(r.cap_b4),
                f(r.img_qa),
                f(r.vid_qa)
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub paradigms: Vec<Paradigm>,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub gen_max_len: usize,
    /// QA fine-tuning; `None` skips the QA columns.
    pub qa: Option<QaConfig>,
    /// Captioning BLEU-4; off skips the column.
    pub caption: bool,
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (v.len() == xs.len() && !v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores one model on held-out data. Image columns stay empty for models
/// that never saw an image; video columns are always filled, since an
/// image-trained encoder still accepts clips.
#[allow(clippy::too_many_arguments)]
pub fn score_model(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    train: &Corpus,
    eval: &Corpus,
    ab: &AblationConfig,
    saw_image: bool,
    seed: u64,
) -> Result<AblationRow> {
    let mut row = AblationRow::default();
    let gen = GenerationConfig::greedy(ab.gen_max_len, "");
    for (modality, saw) in [(Modality::Image, saw_image), (Modality::Video, true)] {
        let held = eval.filter(modality);
        if !saw || held.is_empty() {
            continue;
        }
        let rep = retrieve_corpus(params, cfg, vocab, &held, ab.k)?;
        let qa = match &ab.qa {
            Some(qa) => {
                let tr = train.filter(modality);
                let tuned = finetune_qa(params, cfg, vocab, &tr, &tr.qa_pairs(), &QaConfig { seed, ..qa.clone() })?;
                Some(qa_accuracy(&tuned, cfg, vocab, &held, &held.qa_pairs(), &gen)?)
            }
            None => None,
        };
        match modality {
            Modality::Image => {
                row.img_tr1 = Some(rep.v2t.recall.r1);
                row.img_ir1 = Some(rep.t2v.recall.r1);
                row.img_qa = qa;
                if ab.caption {
                    row.cap_b4 = Some(caption_corpus(params, cfg, vocab, &held, &gen)?.0);
                }
            }
            Modality::Video => {
                row.vid_tr1 = Some(rep.v2t.recall.r1);
                row.vid_ir1 = Some(rep.t2v.recall.r1);
                row.vid_qa = qa;
            }
        }
    }
    Ok(row)
}

/// Pretrains one model per paradigm and seed on `train`, scores each on
/// `eval`, and averages over seeds. The vocabulary must cover both corpora.
pub fn ablate_paradigms(ab: &AblationConfig, vocab: &Vocabulary, train: &Corpus, eval: &Corpus) -> Result<AblationTable> {
    if ab.seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    let mut table = AblationTable::default();
    for &paradigm in &ab.paradigms {
        let saw_image = paradigm.stage_sources().iter().any(|s| s.image);
        let mut rows = Vec::new();
        for &seed in &ab.seeds {
            let mut cfg = ab.train.clone();
            cfg.seed = seed;
            cfg.schedule.paradigm = paradigm;
            let mut trainer = Trainer::new(cfg.clone(), train, vocab)?;
            trainer.run(|_, _| Ok(()))?;
            let params = trainer.into_state().params;
            rows.push(score_model(&params, &cfg.model, vocab, train, eval, ab, saw_image, seed)?);
        }
        let col = |f: fn(&AblationRow) -> Option<f64>| mean_opt(&rows.iter().map(f).collect::<Vec<_>>());
        table.rows.push(AblationRow {
            paradigm: paradigm.as_str().to_string(),
            img_tr1: col(|r| r.img_tr1),
            img_ir1: col(|r| r.img_ir1),
            vid_tr1: col(|r| r.vid_tr1),
            vid_ir1: col(|r| r.vid_ir1),
            cap_b4: col(|r| r.cap_b4),
            img_qa: col(|r| r.img_qa),
            vid_qa: col(|r| r.vid_qa),
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_identical_is_one_and_disjoint_is_zero() {
        let c = ["a picture of a red circle"];
        assert!((bleu4(&c, &[vec!["a picture of a red circle"]]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&["green"], &[vec!["a picture of a red circle"]]).unwrap(), 0.0);
        assert!(bleu4(&c, &[]).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let refs = [vec!["one two three four five six seven eight"]];
        let full = bleu4(&["one two three four five six seven eight"], &refs).unwrap();
        let short = bleu4(&["one two three four"], &refs).unwrap();
        assert!((full - 1.0).abs() < 1e-12);
        assert!((short - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn recall_counts_label_hits() {
        let order = vec![vec![2, 0, 1], vec![0, 1, 2]];
        let r = recall_at(&order, &[5, 7], &[5, 7, 9], 1);
        assert_eq!(r, 0.0);
        assert_eq!(recall_at(&order, &[5, 7], &[5, 7, 9], 2), 1.0);
    }

    #[test]
    fn probe_separates_blobs() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| if (i % 2 == 0) == (j == 0) { 1.0 } else { 0.0 } + 0.01 * i as f64);
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let r = linear_probe(&x, &y, &x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
        assert!(linear_probe(&x, &vec![0; 40], &x, &vec![0; 40], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn table_marks_missing_entries() {
        let t = AblationTable {
            rows: vec![AblationRow {
                paradigm: "video_only".into(),
                vid_ir1: Some(0.25),
                vid_qa: Some(0.5),
                ..Default::default()
            }],
        };
        let s = t.to_text();
        assert!(s.contains("| video_only | - | - | 25.0 | - | - | 50.0 |"), "{s}");
    }

    #[test]
    fn class_indices_in_first_seen_order() {
        assert_eq!(class_indices(&["b", "a", "b", "c"]), (vec![0, 1, 0, 2], 3));
    }
}
