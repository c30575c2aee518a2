//! Transformer building blocks on top of [`Graph`].

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// A graph paired with the parameter set its forward pass reads.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub params: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, params: &'a ParamStore) -> Self {
        Self { g, params }
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        Ok(self.g.param(name, self.params.get(name)?))
    }
}

/// `x @ W + b` over the last axis.
pub fn linear(ctx: Ctx<'_>, name: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{name}.w"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    let h = ctx.g.matmul(x, w);
    Ok(ctx.g.add(h, b))
}

pub fn layer_norm(ctx: Ctx<'_>, name: &str, x: Var) -> Result<Var> {
    let gain = ctx.p(&format!("{name}.g"))?;
    let bias = ctx.p(&format!("{name}.b"))?;
    let n = ctx.g.normalize(x);
    let s = ctx.g.mul(n, gain);
    Ok(ctx.g.add(s, bias))
}

pub fn mlp(ctx: Ctx<'_>, name: &str, x: Var) -> Result<Var> {
    let h = linear(ctx, &format!("{name}.fc1"), x)?;
    let h = ctx.g.gelu(h);
    linear(ctx, &format!("{name}.fc2"), h)
}

/// Multi-head attention. `query` is `[N, Lq, D]`, `memory` is `[N, Lk, D]`;
/// `bias` is an additive score mask broadcastable to `[N, H, Lq, Lk]`
/// (`-inf` removes a key).
pub fn attention(ctx: Ctx<'_>, name: &str, query: Var, memory: Var, bias: Option<Var>, heads: usize) -> Result<Var> {
    let g = ctx.g;
    let qs = g.shape(query);
    let ks = g.shape(memory);
    let (n, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    let dh = d / heads;

    let q = linear(ctx, &format!("{name}.q"), query)?;
    let k = linear(ctx, &format!("{name}.k"), memory)?;
    let v = linear(ctx, &format!("{name}.v"), memory)?;

    let q = g.permute(g.reshape(q, &[n, lq, heads, dh]), &[0, 2, 1, 3]);
    let kt = g.permute(g.reshape(k, &[n, lk, heads, dh]), &[0, 2, 3, 1]);
    let v = g.permute(g.reshape(v, &[n, lk, heads, dh]), &[0, 2, 1, 3]);

    let scores = g.scale(g.matmul(q, kt), 1.0 / (dh as f64).sqrt());
    let scores = match bias {
        Some(b) => g.add(scores, b),
        None => scores,
    };
    let probs = g.softmax(scores);
    let ctxv = g.matmul(probs, v);
    let merged = g.reshape(g.permute(ctxv, &[0, 2, 1, 3]), &[n, lq, d]);
    linear(ctx, &format!("{name}.o"), merged)
}

/// Key-padding bias `[B, 1, 1, L]`: 0 for real tokens, `-inf` for padding.
pub fn key_padding_bias(mask: &Array2<u8>) -> ArrayD<f64> {
    let (b, l) = mask.dim();
    ArrayD::from_shape_fn(IxDyn(&[b, 1, 1, l]), |ix| {
        if mask[[ix[0], ix[3]]] != 0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Causal bias `[1, 1, L, L]` combined with optional key padding.
pub fn causal_bias(mask: Option<&Array2<u8>>, len: usize) -> ArrayD<f64> {
    let b = mask.map_or(1, |m| m.nrows());
    ArrayD::from_shape_fn(IxDyn(&[b, 1, len, len]), |ix| {
        let (row, q, k) = (ix[0], ix[2], ix[3]);
        let padded = mask.is_some_and(|m| m[[row, k]] == 0);
        if k > q || padded {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Fails with the stage/block when any value of `v` is non-finite.
pub(crate) fn check_finite(g: &Graph, v: Var, stage: &'static str, block: usize) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::Numeric { stage, block })
    }
}
