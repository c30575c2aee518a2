//! Whole-model parameter initialisation and the unimodal embedding paths.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::graph::Var;
use crate::nn::{self, Ctx};
use crate::params::{Group, Init, ParamStore};
use crate::text::{self, TokenSequence};
use crate::visual::{self, EncodedVisual, VisualBatch};
use crate::{align, generate};

/// Groups that have a momentum copy.
pub const MOMENTUM_GROUPS: [Group; 3] = [Group::VisualEncoder, Group::TextEncoder, Group::Projection];

pub const LOG_TAU: &str = "temp.log_tau";

/// Initialises every parameter group from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    {
        let mut init = Init::new(&mut store, &mut rng);
        visual::init(&mut init, cfg);
        text::init(&mut init, cfg);
        align::init(&mut init, cfg);
        generate::init(&mut init, cfg);
        init.linear("proj.visual", cfg.dim, cfg.proj_dim, false);
        init.linear("proj.text", cfg.dim, cfg.proj_dim, false);
    }
    store.insert(LOG_TAU, ArrayD::from_elem(IxDyn(&[1]), cfg.init_temperature.ln()));
    store
}

/// Momentum copy of the unimodal encoders and projection heads.
pub fn init_momentum(params: &ParamStore) -> ParamStore {
    params.subset(&MOMENTUM_GROUPS)
}

pub fn temperature(params: &ParamStore) -> Result<f64> {
    Ok(params.get(LOG_TAU)?[[0]].exp())
}

/// Visual encoding plus its unit-norm projection `[B, d_proj]`.
pub fn embed_visual(ctx: Ctx<'_>, cfg: &ModelConfig, batch: &VisualBatch) -> Result<(EncodedVisual, Var)> {
    let enc = visual::encode(ctx, cfg, batch)?;
    let v = nn::linear(ctx, "proj.visual", enc.cls)?;
    Ok((enc, ctx.g.l2_normalize(v)))
}

/// Text encoding ([CLS] sequence) projected to a unit-norm `[B, d_proj]`.
pub fn embed_text(ctx: Ctx<'_>, cfg: &ModelConfig, seq: &TokenSequence) -> Result<Var> {
    let (_, cls) = text::encode_text(ctx, cfg, seq)?;
    let w = nn::linear(ctx, "proj.text", cls)?;
    Ok(ctx.g.l2_normalize(w))
}
