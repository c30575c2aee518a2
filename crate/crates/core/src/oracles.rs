//! Brute-force reference implementations used to check the production
//! paths: explicit-index-set contrastive loss, loop-based attention,
//! central finite differences, and exhaustive pairwise re-ranking.
//!
//! Nothing here is called by training or evaluation code. Arithmetic is
//! plain `f64` loops over slices.

use ndarray::Array4;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::objectives::Label;
use crate::params::ParamStore;
use crate::text::Vocabulary;

/// Deviation between two value lists against a tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Absolute comparison: passes iff `max_abs ≤ tolerance`.
    pub fn absolute(name: &str, got: &[f64], want: &[f64], tolerance: f64) -> Self {
        let (max_abs, max_rel) = deviations(got, want);
        Self {
            name: name.to_string(),
            max_abs,
            max_rel,
            tolerance,
            pass: got.len() == want.len() && max_abs <= tolerance,
        }
    }

    /// Relative comparison: passes iff `max_rel ≤ tolerance`.
    pub fn relative(name: &str, got: &[f64], want: &[f64], tolerance: f64) -> Self {
        let (max_abs, max_rel) = deviations(got, want);
        Self {
            name: name.to_string(),
            max_abs,
            max_rel,
            tolerance,
            pass: got.len() == want.len() && max_rel <= tolerance,
        }
    }
}

/// Relative error uses `|a − b| / max(|a|, |b|, 1e-8)`.
fn deviations(got: &[f64], want: &[f64]) -> (f64, f64) {
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (a, b) in got.iter().zip(want) {
        let d = (a - b).abs();
        if d.is_nan() {
            return (f64::INFINITY, f64::INFINITY);
        }
        max_abs = max_abs.max(d);
        max_rel = max_rel.max(d / a.abs().max(b.abs()).max(1e-8));
    }
    (max_abs, max_rel)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct transcription of the label-aware contrastive loss:
/// for every anchor, loop over the explicit positive set and the explicit
/// denominator set. Keys are `(visual, text, label)` triples whose first `B`
/// entries are the batch itself.
#[allow(clippy::too_many_arguments)]
pub fn oracle_univlc(
    v: &[Vec<f64>],
    w: &[Vec<f64>],
    y: &[Label],
    key_v: &[Vec<f64>],
    key_w: &[Vec<f64>],
    key_y: &[Label],
    tau: f64,
    normalize: bool,
) -> f64 {
    let b = y.len();
    let m = key_y.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut positives: Vec<usize> = (0..m).filter(|&k| key_y[k] == y[i]).collect();
        if positives.is_empty() {
            positives.push(i);
        }
        let scale = if normalize { 1.0 / positives.len() as f64 } else { 1.0 };

        let mut denom_v2t = 0.0;
        let mut denom_t2v = 0.0;
        for mm in 0..m {
            denom_v2t += (dot(&v[i], &key_w[mm]) / tau).exp();
            denom_t2v += (dot(&w[i], &key_v[mm]) / tau).exp();
        }
        let mut l_v2t = 0.0;
        let mut l_t2v = 0.0;
        for &k in &positives {
            l_v2t -= ((dot(&v[i], &key_w[k]) / tau).exp() / denom_v2t).ln();
            l_t2v -= ((dot(&w[i], &key_v[k]) / tau).exp() / denom_t2v).ln();
        }
        total += scale * (l_v2t + l_t2v);
    }
    0.5 * total / b as f64
}

/// Symmetric InfoNCE with in-batch negatives, matching pairs on the diagonal.
pub fn infonce(v: &[Vec<f64>], w: &[Vec<f64>], tau: f64) -> f64 {
    let b = v.len();
    let ce = |a: &[Vec<f64>], c: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..b).map(|j| dot(&a[i], &c[j]) / tau).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            s += lse - logits[i];
        }
        s / b as f64
    };
    0.5 * (ce(v, w) + ce(w, v))
}

/// Loop-based multi-head attention for one sequence. Weight matrices are
/// `[in, out]` row-major; biases `[out]`. `key_mask[k] == false` drops key
/// `k`; `causal` drops keys after the query.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    query: &[Vec<f64>],
    memory: &[Vec<f64>],
    wq: (&[Vec<f64>], &[f64]),
    wk: (&[Vec<f64>], &[f64]),
    wv: (&[Vec<f64>], &[f64]),
    wo: (&[Vec<f64>], &[f64]),
    heads: usize,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Vec<Vec<f64>> {
    let affine = |x: &[f64], (w, b): (&[Vec<f64>], &[f64])| -> Vec<f64> {
        (0..b.len())
            .map(|o| b[o] + (0..x.len()).map(|i| x[i] * w[i][o]).sum::<f64>())
            .collect()
    };
    let q: Vec<Vec<f64>> = query.iter().map(|x| affine(x, wq)).collect();
    let k: Vec<Vec<f64>> = memory.iter().map(|x| affine(x, wk)).collect();
    let v: Vec<Vec<f64>> = memory.iter().map(|x| affine(x, wv)).collect();
    let d = q[0].len();
    let dh = d / heads;
    let mut out = Vec::with_capacity(q.len());
    for (qi, qrow) in q.iter().enumerate() {
        let mut merged = vec![0.0; d];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let mut scores = Vec::new();
            for (ki, krow) in k.iter().enumerate() {
                let allowed = key_mask.is_none_or(|m| m[ki]) && (!causal || ki <= qi);
                if allowed {
                    let s = dot(&qrow[span.clone()], &krow[span.clone()]) / (dh as f64).sqrt();
                    scores.push((ki, s));
                }
            }
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            for (ki, s) in scores {
                let p = (s - max).exp() / z;
                for (j, c) in span.clone().enumerate() {
                    merged[c] += p * v[ki][h * dh + j];
                }
            }
        }
        out.push(affine(&merged, wo));
    }
    out
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub const FD_EPS: f64 = 1e-5;

/// Scores every (query, gallery item) pair one at a time through the
/// alignment decoder and stable-sorts by matching probability. Returns the
/// gallery order for each text query.
pub fn oracle_rank(
    params: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    queries: &[String],
    gallery: &[Array4<f64>],
) -> Result<Vec<Vec<usize>>> {
    use crate::graph::Graph;
    use crate::nn::Ctx;
    use crate::text::{tokenize_batch, Special};
    use crate::visual::{encode, VisualBatch};

    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(gallery.len());
        for (i, item) in gallery.iter().enumerate() {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, params);
            let vis = encode(ctx, cfg, &VisualBatch::stack(&[item])?)?;
            let text = tokenize_batch(&[q], vocab, Special::Enc, false, cfg.max_text_len)?;
            let fused = crate::align::fuse(ctx, cfg, &text, &vis)?;
            let p = crate::align::vlm_head(ctx, &fused)?.p_vlm[0];
            scored.push((i, p));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        out.push(scored.into_iter().map(|s| s.0).collect());
    }
    Ok(out)
}
