//! Pretraining objectives: the label-aware contrastive loss over a momentum
//! memory bank, vision-language matching, and language modelling.

use ndarray::{concatenate, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::generate;
use crate::graph::{Graph, Var};
use crate::model;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::text::{Special, TokenSequence, Vocabulary};
use crate::visual::{EncodedVisual, VisualBatch};

/// Index of a grouped language description.
pub type Label = u64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub univlc: f64,
    pub vlm: f64,
    pub lm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            univlc: 1.0,
            vlm: 1.0,
            lm: 1.0,
        }
    }
}

/// Ring buffer of the `capacity` most recent momentum embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    visual: Array2<f64>,
    text: Array2<f64>,
    labels: Vec<Label>,
    cursor: usize,
    filled: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            visual: Array2::zeros((capacity, dim)),
            text: Array2::zeros((capacity, dim)),
            labels: vec![0; capacity],
            cursor: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.labels.len()
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn reset(&mut self) {
        self.visual.fill(0.0);
        self.text.fill(0.0);
        self.labels.fill(0);
        self.cursor = 0;
        self.filled = 0;
    }

    /// Overwrites the oldest entries with the batch, in batch order.
    pub fn enqueue(&mut self, v: &Array2<f64>, w: &Array2<f64>, y: &[Label]) -> Result<()> {
        let b = y.len();
        if b > self.capacity() {
            return Err(Error::Argument(format!(
                "batch of {b} exceeds memory bank capacity {}",
                self.capacity()
            )));
        }
        if v.nrows() != b || w.nrows() != b {
            return Err(Error::Argument("embedding and label counts differ".into()));
        }
        for (i, &label) in y.iter().enumerate() {
            let slot = self.cursor;
            self.visual.row_mut(slot).assign(&v.row(i));
            self.text.row_mut(slot).assign(&w.row(i));
            self.labels[slot] = label;
            self.cursor = (self.cursor + 1) % self.capacity();
        }
        self.filled = (self.filled + b).min(self.capacity());
        Ok(())
    }

    /// Occupied slots in storage order.
    pub fn occupied(&self) -> std::ops::Range<usize> {
        0..self.filled
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels[..self.filled]
    }

    pub fn visual(&self) -> ndarray::ArrayView2<'_, f64> {
        self.visual.slice(ndarray::s![..self.filled, ..])
    }

    pub fn text(&self) -> ndarray::ArrayView2<'_, f64> {
        self.text.slice(ndarray::s![..self.filled, ..])
    }

    /// Restores a bank from its raw parts (checkpoint loading).
    pub fn from_parts(visual: Array2<f64>, text: Array2<f64>, labels: Vec<Label>, cursor: usize, filled: usize) -> Result<Self> {
        let cap = labels.len();
        if visual.nrows() != cap || text.nrows() != cap || cursor >= cap.max(1) || filled > cap {
            return Err(Error::Checkpoint("inconsistent memory bank".into()));
        }
        Ok(Self {
            visual,
            text,
            labels,
            cursor,
            filled,
        })
    }

    pub fn raw_visual(&self) -> &Array2<f64> {
        &self.visual
    }

    pub fn raw_text(&self) -> &Array2<f64> {
        &self.text
    }

    pub fn raw_labels(&self) -> &[Label] {
        &self.labels
    }

    /// Scoring keys: the batch's own momentum embeddings first, then the
    /// occupied bank entries.
    pub fn keys_with_batch(&self, v_m: &Array2<f64>, w_m: &Array2<f64>, y: &[Label]) -> KeySet {
        let visual = concatenate(Axis(0), &[v_m.view(), self.visual()]).expect("equal widths");
        let text = concatenate(Axis(0), &[w_m.view(), self.text()]).expect("equal widths");
        let labels = y.iter().chain(self.labels()).copied().collect();
        KeySet { visual, text, labels }
    }
}

/// Detached contrastive keys. By convention the first `B` rows are the
/// current batch's own entries, so row `i` is sample `i`'s self-positive.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySet {
    pub visual: Array2<f64>,
    pub text: Array2<f64>,
    pub labels: Vec<Label>,
}

impl KeySet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-sample positive weights `[B, K]`: `1/|P(i)|` (or 1) on keys sharing
/// the sample's label; falls back to the self slot when none match.
pub fn positive_weights(y: &[Label], key_labels: &[Label], normalize: bool) -> Array2<f64> {
    let mut w = Array2::zeros((y.len(), key_labels.len()));
    for (i, &yi) in y.iter().enumerate() {
        let pos: Vec<usize> = key_labels
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == yi)
            .map(|(k, _)| k)
            .collect();
        let pos = if pos.is_empty() { vec![i] } else { pos };
        let share = if normalize { 1.0 / pos.len() as f64 } else { 1.0 };
        for k in pos {
            w[[i, k]] = share;
        }
    }
    w
}

/// Label-aware symmetric contrastive loss. `v`, `w` are unit-norm live
/// embeddings `[B, d]`; `log_tau` is `[1]`. Returns
/// `½·mean_i (L_v2t(i) + L_t2v(i))`.
pub fn univlc_loss(g: &Graph, v: Var, w: Var, y: &[Label], keys: &KeySet, log_tau: Var, normalize: bool) -> Result<Var> {
    let b = y.len();
    if g.shape(v)[0] != b || g.shape(w)[0] != b {
        return Err(Error::Argument("embedding rows differ from label count".into()));
    }
    if keys.len() < b {
        return Err(Error::Argument(format!(
            "{} contrastive keys cannot cover a batch of {b}",
            keys.len()
        )));
    }
    let inv_tau = g.exp(g.neg(log_tau));
    let pos = g.constant(positive_weights(y, &keys.labels, normalize).into_dyn());
    let direction = |anchor: Var, bank: &Array2<f64>| {
        let kt = g.constant(bank.t().to_owned().into_dyn());
        let logits = g.mul(g.matmul(anchor, kt), inv_tau);
        let logp = g.log_softmax(logits);
        g.neg(g.sum(g.mul(pos, logp)))
    };
    let v2t = direction(v, &keys.text);
    let t2v = direction(w, &keys.visual);
    Ok(g.scale(g.add(v2t, t2v), 0.5 / b as f64))
}

/// One matching example: the text row paired with visual `i`, and whether
/// the pair counts as matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VlmPair {
    pub partner: usize,
    pub target: bool,
}

/// With probability ½ keeps each text, otherwise swaps in the text of a
/// different batch element; the target is 1 iff the labels agree.
pub fn sample_vlm_pairs(rng: &mut impl Rng, y: &[Label]) -> Result<Vec<VlmPair>> {
    let b = y.len();
    if b < 2 {
        return Err(Error::Argument("matching loss needs a batch of at least 2 to draw replacements".into()));
    }
    Ok((0..b)
        .map(|i| {
            if rng.random_bool(0.5) {
                VlmPair {
                    partner: i,
                    target: true,
                }
            } else {
                let mut j = rng.random_range(0..b - 1);
                if j >= i {
                    j += 1;
                }
                VlmPair {
                    partner: j,
                    target: y[j] == y[i],
                }
            }
        })
        .collect())
}

/// Binary cross-entropy of matching probabilities, averaged.
pub fn binary_cross_entropy(p: &[f64], target: &[bool]) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let q = if t { p } else { 1.0 - p };
            if q >= 1.0 {
                0.0
            } else {
                -q.ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Matching loss. `text` carries [ENC] at position 0 and row `j` is the
/// text of batch element `j`; pairs choose which row each visual sees.
pub fn vlm_loss(ctx: Ctx<'_>, cfg: &ModelConfig, visual: &EncodedVisual, text: &TokenSequence, pairs: &[VlmPair]) -> Result<Var> {
    let b = pairs.len();
    if b < 2 {
        return Err(Error::Argument("matching loss needs a batch of at least 2".into()));
    }
    let g = ctx.g;
    let partners: Vec<usize> = pairs.iter().map(|p| p.partner).collect();
    let fused = align::fuse(ctx, cfg, &text.select(&partners), visual)?;
    let logp = g.log_softmax(align::vlm_logits(ctx, &fused)?);
    let onehot = ArrayD::from_shape_fn(IxDyn(&[b, 2]), |ix| {
        if (ix[1] == 1) == pairs[ix[0]].target {
            1.0 / b as f64
        } else {
            0.0
        }
    });
    Ok(g.neg(g.sum(g.mul(logp, g.constant(onehot)))))
}

/// Mean token cross-entropy over masked positions. `logits` is `[B, T, V]`.
pub fn sequence_cross_entropy(g: &Graph, logits: Var, targets: &Array2<usize>, mask: &Array2<u8>) -> Result<Var> {
    let shape = g.shape(logits);
    let (b, t, vsize) = (shape[0], shape[1], shape[2]);
    if targets.dim() != (b, t) || mask.dim() != (b, t) {
        return Err(Error::Argument("target shape does not match logits".into()));
    }
    let count: usize = mask.iter().map(|&m| m as usize).sum();
    if count == 0 {
        return Err(Error::Argument("target has no real tokens".into()));
    }
    let mut w = ArrayD::zeros(IxDyn(&[b, t, vsize]));
    for ((i, l), &m) in mask.indexed_iter() {
        if m != 0 {
            let id = targets[[i, l]];
            if id >= vsize {
                return Err(Error::Argument(format!("target id {id} outside the vocabulary")));
            }
            w[[i, l, id]] = 1.0 / count as f64;
        }
    }
    let logp = g.log_softmax(logits);
    Ok(g.neg(g.sum(g.mul(logp, g.constant(w)))))
}

/// Teacher-forced LM loss of a `[DEC] ... [EOS]` target against a memory.
pub fn lm_loss_memory(
    ctx: Ctx<'_>,
    cfg: &ModelConfig,
    memory: crate::text::Memory<'_>,
    target: &TokenSequence,
    eos: usize,
) -> Result<Var> {
    let (b, l) = target.ids.dim();
    if target.mask.iter().all(|&m| m == 0) || l < 2 {
        return Err(Error::Argument("target has no real tokens".into()));
    }
    for (row, ids) in target.ids.rows().into_iter().enumerate() {
        if !ids.iter().zip(target.mask.row(row)).any(|(&id, &m)| m != 0 && id == eos) {
            return Err(Error::Argument(format!("target row {row} has no [EOS]")));
        }
    }
    let g = ctx.g;
    let logits = generate::decode_memory(ctx, cfg, target, memory)?;
    let pred = g.narrow(logits, 1, 0, l - 1);
    let next = target.ids.slice(ndarray::s![.., 1..]).to_owned();
    let mask = target.mask.slice(ndarray::s![.., 1..]).to_owned();
    debug_assert_eq!(next.nrows(), b);
    sequence_cross_entropy(g, pred, &next, &mask)
}

pub fn lm_loss(ctx: Ctx<'_>, cfg: &ModelConfig, visual: &EncodedVisual, target: &TokenSequence, eos: usize) -> Result<Var> {
    lm_loss_memory(
        ctx,
        cfg,
        crate::text::Memory {
            tokens: visual.tokens,
            mask: None,
        },
        target,
        eos,
    )
}

/// `mom ← m·mom + (1−m)·live` for every momentum parameter.
pub fn momentum_step(live: &ParamStore, mom: &mut ParamStore, m: f64) -> Result<()> {
    for (name, mv) in mom.iter_mut() {
        let lv = live.get(name)?;
        if lv.shape() != mv.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                detail: format!("live {:?} vs momentum {:?}", lv.shape(), mv.shape()),
            });
        }
        ndarray::Zip::from(mv).and(lv).for_each(|a, &b| *a = m * *a + (1.0 - m) * b);
    }
    Ok(())
}

/// Momentum-encoder embeddings (no gradient) `[B, d]` for both modalities.
pub fn momentum_embed(
    mom: &ParamStore,
    cfg: &ModelConfig,
    visual: &VisualBatch,
    text: &TokenSequence,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, mom);
    let (_, v) = model::embed_visual(ctx, cfg, visual)?;
    let w = model::embed_text(ctx, cfg, text)?;
    Ok((align::to_array2(&g, v), align::to_array2(&g, w)))
}

/// Everything a training batch feeds the three objectives.
#[derive(Clone, Debug)]
pub struct LossInputs<'a> {
    pub visual: &'a VisualBatch,
    pub texts: &'a [String],
    pub labels: &'a [Label],
    pub keys: &'a KeySet,
    pub pairs: &'a [VlmPair],
}

/// Weighted total loss and its unweighted terms (as graph nodes).
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub univlc: Var,
    pub vlm: Var,
    pub lm: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub univlc: f64,
    pub vlm: f64,
    pub lm: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.scalar(self.total),
            univlc: g.scalar(self.univlc),
            vlm: g.scalar(self.vlm),
            lm: g.scalar(self.lm),
        }
    }
}

/// `λ1·UniVLC + λ2·VLM + λ3·LM` over one batch.
pub fn total_loss(
    ctx: Ctx<'_>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    inputs: &LossInputs<'_>,
    weights: LossWeights,
    normalize_positives: bool,
) -> Result<LossTerms> {
    let g = ctx.g;
    let (enc, v) = model::embed_visual(ctx, cfg, inputs.visual)?;
    let cls_text = crate::text::tokenize_batch(inputs.texts, vocab, Special::Cls, false, cfg.max_text_len)?;
    let w = model::embed_text(ctx, cfg, &cls_text)?;
    let log_tau = ctx.p(model::LOG_TAU)?;
    let univlc = univlc_loss(g, v, w, inputs.labels, inputs.keys, log_tau, normalize_positives)?;

    let enc_text = cls_text.with_start(vocab.id(Special::Enc));
    let vlm = vlm_loss(ctx, cfg, &enc, &enc_text, inputs.pairs)?;

    let target = generate::lm_targets(vocab, cfg, inputs.texts)?;
    let lm = lm_loss(ctx, cfg, &enc, &target, vocab.id(Special::Eos))?;

    let total = g.add(
        g.add(g.scale(univlc, weights.univlc), g.scale(vlm, weights.vlm)),
        g.scale(lm, weights.lm),
    );
    Ok(LossTerms { total, univlc, vlm, lm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifo_arithmetic() {
        let mut bank = MemoryBank::new(4, 2);
        let rows = |start: f64| Array2::from_shape_fn((3, 2), |(i, _)| start + i as f64);
        bank.enqueue(&rows(0.0), &rows(10.0), &[0, 1, 2]).unwrap();
        assert_eq!((bank.filled(), bank.cursor()), (3, 3));
        bank.enqueue(&rows(3.0), &rows(13.0), &[3, 4, 5]).unwrap();
        assert_eq!((bank.filled(), bank.cursor()), (4, 2));
        // slots: [4, 5, 2, 3] -> last four written are 2, 3, 4, 5
        assert_eq!(bank.labels(), &[4, 5, 2, 3]);
        for (k, &lab) in bank.labels().iter().enumerate() {
            assert_eq!(bank.visual()[[k, 0]], lab as f64);
            assert_eq!(bank.text()[[k, 1]], 10.0 + lab as f64);
        }
        bank.enqueue(&rows(6.0), &rows(16.0), &[6, 7, 8]).unwrap();
        assert_eq!(bank.filled(), 4);
        let too_big = Array2::zeros((5, 2));
        assert!(bank.enqueue(&too_big, &too_big, &[0; 5]).is_err());
    }

    #[test]
    fn positives_fall_back_to_self() {
        let w = positive_weights(&[7, 1], &[7, 2, 7, 3], true);
        assert_eq!(w.row(0).to_vec(), vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(w.row(1).to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
        let raw = positive_weights(&[7], &[7, 7, 7], false);
        assert_eq!(raw.row(0).to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn single_self_key_gives_zero_loss() {
        let g = Graph::new();
        let e = Array2::from_shape_vec((1, 3), vec![0.6, 0.8, 0.0]).unwrap();
        let v = g.leaf(e.clone().into_dyn());
        let keys = KeySet {
            visual: e.clone(),
            text: e.clone(),
            labels: vec![5],
        };
        let lt = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.07f64.ln()));
        let loss = univlc_loss(&g, v, v, &[5], &keys, lt, true).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn bank_keys_are_detached() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let v = g.leaf(e.clone().into_dyn());
        let bank = MemoryBank::new(4, 3);
        let keys = bank.keys_with_batch(&e, &e, &[0, 1]);
        let lt = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let loss = univlc_loss(&g, v, v, &[0, 1], &keys, lt, true).unwrap();
        let grads = g.backward(loss);
        assert!(grads.get(v).is_some() && grads.get(lt).is_some());
        // Only the two leaves created above can hold gradients.
        assert!(g.bound_params().is_empty());
    }

    #[test]
    fn momentum_limits_and_geometric_convergence() {
        let mut live = ParamStore::new();
        live.insert("ve.w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut mom = ParamStore::new();
        mom.insert("ve.w", ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let mut m0 = mom.clone();
        momentum_step(&live, &mut m0, 0.0).unwrap();
        assert_eq!(m0, live);
        let mut m1 = mom.clone();
        momentum_step(&live, &mut m1, 1.0).unwrap();
        assert_eq!(m1, mom);
        let m = 0.9;
        let mut cur = mom.clone();
        for n in 1..=20 {
            momentum_step(&live, &mut cur, m).unwrap();
            let gap = cur.get("ve.w").unwrap()[[0]] - 1.0;
            assert!((gap - m.powi(n) * 4.0).abs() < 1e-12);
        }
        let mut bad = ParamStore::new();
        bad.insert("ve.w", ArrayD::zeros(IxDyn(&[3])));
        let err = momentum_step(&live, &mut bad, 0.5).unwrap_err();
        assert!(err.to_string().contains("ve.w"));
    }

    #[test]
    fn vlm_pair_sampling_is_label_aware() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_vlm_pairs(&mut rng, &[1]).is_err());
        let y = [4, 4, 9, 4];
        let mut swaps = 0;
        for _ in 0..200 {
            for (i, p) in sample_vlm_pairs(&mut rng, &y).unwrap().iter().enumerate() {
                assert_eq!(p.target, y[p.partner] == y[i]);
                if p.partner != i {
                    swaps += 1;
                }
            }
        }
        assert!((300..500).contains(&swaps), "swap rate off: {swaps}/800");
    }

    #[test]
    fn bce_reference_values() {
        assert_eq!(binary_cross_entropy(&[1.0, 0.0], &[true, false]), 0.0);
        let l = binary_cross_entropy(&[0.5; 4], &[true, false, true, true]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let g = Graph::new();
        let logits = g.leaf(ArrayD::zeros(IxDyn(&[2, 3, 8])));
        let targets = Array2::from_shape_vec((2, 3), vec![1, 2, 3, 4, 5, 0]).unwrap();
        let mask = Array2::from_shape_vec((2, 3), vec![1, 1, 1, 1, 1, 0]).unwrap();
        let l = sequence_cross_entropy(&g, logits, &targets, &mask).unwrap();
        assert!((g.scalar(l) - 8f64.ln()).abs() < 1e-12);

        let mut sharp = ArrayD::zeros(IxDyn(&[1, 2, 8]));
        sharp[[0, 0, 3]] = 200.0;
        sharp[[0, 1, 6]] = 200.0;
        let s = g.constant(sharp);
        let t = Array2::from_shape_vec((1, 2), vec![3, 6]).unwrap();
        let l = sequence_cross_entropy(&g, s, &t, &Array2::ones((1, 2))).unwrap();
        assert!(g.scalar(l) < 1e-12);

        let none = Array2::zeros((2, 3));
        assert!(sequence_cross_entropy(&g, logits, &targets, &none).is_err());
    }
}
