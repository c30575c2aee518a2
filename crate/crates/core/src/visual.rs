//! Unified image/video encoder with divided space-time attention.
//!
//! Images (`T = 1`) go through the 2D patch tokenizer and the spatial
//! attention stack only. Videos go through the 3D (tubelet) tokenizer and
//! every block runs temporal attention (tokens at the same spatial index
//! attending across time) before spatial attention (tokens of one temporal
//! position attending across space). The [CLS] token is replicated per
//! temporal position for spatial attention, excluded from temporal
//! attention, and its replicas are averaged before the feed-forward layer.

use ndarray::{s, Array2, Array3, Array4, Array5, ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Ctx};
use crate::params::{Init, ParamStore};

/// A batch of frame stacks `[B, T, H, W, C]`; `T = 1` encodes an image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualBatch {
    frames: Array5<f64>,
}

impl VisualBatch {
    pub fn new(frames: Array5<f64>) -> Result<Self> {
        if frames.shape().contains(&0) {
            return Err(Error::Argument(format!("empty visual batch {:?}", frames.shape())));
        }
        if !frames.iter().all(|x| x.is_finite()) {
            return Err(Error::Argument("visual batch contains non-finite values".into()));
        }
        Ok(Self { frames })
    }

    /// Stacks equally-shaped `[T, H, W, C]` items.
    pub fn stack(items: &[&Array4<f64>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("cannot stack an empty list of visuals".into()))?;
        for (i, it) in items.iter().enumerate() {
            if it.shape() != first.shape() {
                return Err(Error::Dimension {
                    axis: "T",
                    detail: format!("item {i} has shape {:?}, expected {:?}", it.shape(), first.shape()),
                });
            }
        }
        let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
        let frames = ndarray::concatenate(Axis(0), &views).expect("equal shapes");
        Self::new(frames)
    }

    pub fn frames(&self) -> &Array5<f64> {
        &self.frames
    }

    pub fn batch_size(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_image(&self) -> bool {
        self.num_frames() == 1
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            frames: self.frames.select(Axis(0), idx),
        }
    }

    /// Checks the batch against the encoder geometry.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let sh = self.frames.shape();
        let (t, h, w, c) = (sh[1], sh[2], sh[3], sh[4]);
        let p = cfg.patch_size;
        if h % p != 0 {
            return Err(Error::Dimension {
                axis: "H",
                detail: format!("height {h} is not divisible by patch size {p}"),
            });
        }
        if w % p != 0 {
            return Err(Error::Dimension {
                axis: "W",
                detail: format!("width {w} is not divisible by patch size {p}"),
            });
        }
        if h != cfg.image_size {
            return Err(Error::Dimension {
                axis: "H",
                detail: format!("height {h} differs from the configured image size {}", cfg.image_size),
            });
        }
        if w != cfg.image_size {
            return Err(Error::Dimension {
                axis: "W",
                detail: format!("width {w} differs from the configured image size {}", cfg.image_size),
            });
        }
        if c != cfg.channels {
            return Err(Error::Dimension {
                axis: "C",
                detail: format!("{c} channels, expected {}", cfg.channels),
            });
        }
        if t > 1 && t % cfg.tubelet != 0 {
            return Err(Error::Dimension {
                axis: "T",
                detail: format!("{t} frames are not divisible by tubelet depth {}", cfg.tubelet),
            });
        }
        Ok(())
    }
}

/// Output of [`encode`]: all tokens (CLS first) and the pooled CLS feature.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVisual {
    /// `[B, 1 + T'·S, D]`
    pub tokens: Var,
    /// `[B, D]`
    pub cls: Var,
    pub temporal_len: usize,
    pub spatial_len: usize,
}

impl EncodedVisual {
    pub fn token_count(&self) -> usize {
        1 + self.temporal_len * self.spatial_len
    }

    pub fn tokens_array(&self, g: &Graph) -> Array3<f64> {
        g.value(self.tokens).clone().into_dimensionality().expect("3-d tokens")
    }

    pub fn cls_array(&self, g: &Graph) -> Array2<f64> {
        g.value(self.cls).clone().into_dimensionality().expect("2-d cls")
    }
}

pub fn init(init: &mut Init<'_, impl Rng>, cfg: &ModelConfig) {
    let d = cfg.dim;
    let p = cfg.patch_size;
    let patch_dim = p * p * cfg.channels;
    init.linear("ve.tok2d", patch_dim, d, false);
    init.normal("ve.cls", &[d], 0.02);
    init.normal("ve.pos_spatial", &[1 + cfg.spatial_tokens(), d], 0.02);
    init.zeros("ve.pos_temporal", &[cfg.temporal_positions(), d]);
    for i in 0..cfg.visual_depth {
        let b = format!("ve.blocks.{i}");
        if cfg.temporal_attention {
            init.layer_norm(&format!("{b}.temporal.ln"), d);
            init.attention(&format!("{b}.temporal.attn"), d, true);
        }
        init.layer_norm(&format!("{b}.spatial.ln"), d);
        init.attention(&format!("{b}.spatial.attn"), d, false);
        init.layer_norm(&format!("{b}.mlp.ln"), d);
        init.mlp(&format!("{b}.mlp"), d, d * cfg.mlp_ratio);
    }
    init.layer_norm("ve.norm", d);
    inflate_video_tokenizer(init.store, cfg).expect("2D tokenizer was just initialised");
}

/// Sets the 3D tokenizer to the 2D tokenizer replicated over the tubelet
/// depth and divided by it, so a clip of identical frames tokenizes exactly
/// like one of its frames.
pub fn inflate_video_tokenizer(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let w2 = store.get("ve.tok2d.w")?.clone();
    let b2 = store.get("ve.tok2d.b")?.clone();
    let rows = w2.shape()[0];
    let depth = cfg.tubelet;
    let mut w3 = ArrayD::zeros(IxDyn(&[rows * depth, w2.shape()[1]]));
    for t in 0..depth {
        let mut block = w3.slice_mut(s![t * rows..(t + 1) * rows, ..]);
        block.assign(&(&w2 / depth as f64));
    }
    store.insert("ve.tok3d.w", w3);
    store.insert("ve.tok3d.b", b2);
    Ok(())
}

/// Linear-interpolation weights `[t_new, t_old]` with aligned end points.
pub fn interpolation_matrix(t_old: usize, t_new: usize) -> Array2<f64> {
    let mut m = Array2::zeros((t_new, t_old));
    for i in 0..t_new {
        let pos = if t_new == 1 || t_old == 1 {
            0.0
        } else {
            i as f64 * (t_old - 1) as f64 / (t_new - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t_old - 1);
        let frac = pos - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        if frac > 0.0 {
            m[[i, hi]] += frac;
        }
    }
    m
}

/// Resamples a temporal position table `[T_old, D]` to `t_new` rows by
/// linear interpolation along time.
pub fn interpolate_temporal_pos(pe: &Array2<f64>, t_new: usize) -> Result<Array2<f64>> {
    let t_old = pe.nrows();
    if t_old == 0 {
        return Err(Error::Argument("temporal position table is empty".into()));
    }
    if t_new == 0 {
        return Err(Error::Argument("target temporal length must be at least 1".into()));
    }
    if t_new == t_old {
        return Ok(pe.clone());
    }
    Ok(interpolation_matrix(t_old, t_new).dot(pe))
}

/// Patch features `[B, T'·S, tubelet·P·P·C]`, ordered time-major.
fn extract_patches(frames: &Array5<f64>, patch: usize, depth: usize) -> ArrayD<f64> {
    let sh = frames.shape();
    let (b, t, h, w, c) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let (ny, nx) = (h / patch, w / patch);
    let tp = t / depth;
    let feat = depth * patch * patch * c;
    let mut out = ArrayD::zeros(IxDyn(&[b, tp * ny * nx, feat]));
    for bi in 0..b {
        for ti in 0..tp {
            for py in 0..ny {
                for px in 0..nx {
                    let tok = ti * ny * nx + py * nx + px;
                    let mut f = 0;
                    for dt in 0..depth {
                        for dy in 0..patch {
                            for dx in 0..patch {
                                for ch in 0..c {
                                    out[[bi, tok, f]] =
                                        frames[[bi, ti * depth + dt, py * patch + dy, px * patch + dx, ch]];
                                    f += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Patch tokens `[B, T'·S, D]` with spatial and temporal position
/// encodings added, plus `T'`.
pub fn tokenize(ctx: Ctx<'_>, cfg: &ModelConfig, batch: &VisualBatch) -> Result<(Var, usize)> {
    batch.validate(cfg)?;
    let g = ctx.g;
    let (depth, tok) = if batch.is_image() {
        (1, "ve.tok2d")
    } else {
        (cfg.tubelet, "ve.tok3d")
    };
    let tp = batch.num_frames() / depth;
    let s = cfg.spatial_tokens();
    let b = batch.batch_size();
    let d = cfg.dim;

    let patches = g.constant(extract_patches(batch.frames(), cfg.patch_size, depth));
    let x = nn::linear(ctx, tok, patches)?;

    let pos_s = g.narrow(ctx.p("ve.pos_spatial")?, 0, 1, s);
    let pos_t_full = ctx.p("ve.pos_temporal")?;
    let t_old = g.shape(pos_t_full)[0];
    let pos_t = if t_old == tp {
        pos_t_full
    } else {
        let m = g.constant(interpolation_matrix(t_old, tp).into_dyn());
        g.matmul(m, pos_t_full)
    };
    // [T', 1, D] + [1, S, D] -> [T', S, D] -> [T'·S, D]
    let pos = g.add(g.reshape(pos_t, &[tp, 1, d]), g.reshape(pos_s, &[1, s, d]));
    let pos = g.reshape(pos, &[tp * s, d]);
    let x = g.add(x, pos);
    debug_assert_eq!(g.shape(x), vec![b, tp * s, d]);
    Ok((x, tp))
}

/// Full forward pass of the visual encoder.
pub fn encode(ctx: Ctx<'_>, cfg: &ModelConfig, batch: &VisualBatch) -> Result<EncodedVisual> {
    let g = ctx.g;
    let (patches, tp) = tokenize(ctx, cfg, batch)?;
    let b = batch.batch_size();
    let s = cfg.spatial_tokens();
    let d = cfg.dim;

    let cls0 = g.add(ctx.p("ve.cls")?, g.reshape(g.narrow(ctx.p("ve.pos_spatial")?, 0, 0, 1), &[d]));
    let cls_idx = vec![0; b];
    let mut cls = g.reshape(g.index_select(g.reshape(cls0, &[1, d]), 0, &cls_idx), &[b, 1, d]);
    let mut patches = patches;
    let replicate: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, tp)).collect();

    for i in 0..cfg.visual_depth {
        let blk = format!("ve.blocks.{i}");
        if tp > 1 && cfg.temporal_attention {
            // [B, T'S, D] -> [B·S, T', D]
            let xt = g.reshape(g.permute(g.reshape(patches, &[b, tp, s, d]), &[0, 2, 1, 3]), &[b * s, tp, d]);
            let h = nn::layer_norm(ctx, &format!("{blk}.temporal.ln"), xt)?;
            let a = nn::attention(ctx, &format!("{blk}.temporal.attn"), h, h, None, cfg.heads)?;
            let xt = g.add(xt, a);
            patches = g.reshape(g.permute(g.reshape(xt, &[b, s, tp, d]), &[0, 2, 1, 3]), &[b, tp * s, d]);
        }

        // [B·T', 1 + S, D] with CLS replicated per temporal position.
        let cls_rep = g.index_select(cls, 0, &replicate);
        let frames = g.reshape(patches, &[b * tp, s, d]);
        let seq = g.concat(&[cls_rep, frames], 1);
        let h = nn::layer_norm(ctx, &format!("{blk}.spatial.ln"), seq)?;
        let a = nn::attention(ctx, &format!("{blk}.spatial.attn"), h, h, None, cfg.heads)?;
        let seq = g.add(seq, a);
        let cls_out = g.reshape(g.narrow(seq, 1, 0, 1), &[b, tp, d]);
        let cls_mean = g.mean_axis(cls_out, 1);
        let frames_out = g.reshape(g.narrow(seq, 1, 1, s), &[b, tp * s, d]);

        let x = g.concat(&[cls_mean, frames_out], 1);
        let h = nn::layer_norm(ctx, &format!("{blk}.mlp.ln"), x)?;
        let m = nn::mlp(ctx, &format!("{blk}.mlp"), h)?;
        let x = g.add(x, m);
        nn::check_finite(g, x, "visual encoder", i)?;
        cls = g.narrow(x, 1, 0, 1);
        patches = g.narrow(x, 1, 1, tp * s);
    }

    let x = g.concat(&[cls, patches], 1);
    let tokens = nn::layer_norm(ctx, "ve.norm", x)?;
    let cls = g.reshape(g.narrow(tokens, 1, 0, 1), &[b, d]);
    Ok(EncodedVisual {
        tokens,
        cls,
        temporal_len: tp,
        spatial_len: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init(&mut Init::new(&mut store, &mut rng), cfg);
        store
    }

    fn random_frames(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize, usize)) -> Array5<f64> {
        Array5::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn token_counts_for_image_and_video() {
        let mut cfg = ModelConfig::tiny(10);
        cfg.image_size = 32;
        cfg.patch_size = 16;
        cfg.tubelet = 2;
        let store = setup(&cfg, 0);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let img = VisualBatch::new(Array5::zeros((1, 1, 32, 32, 3))).unwrap();
        let (t, tp) = tokenize(ctx, &cfg, &img).unwrap();
        assert_eq!((g.shape(t), tp), (vec![1, 4, cfg.dim], 1));
        let vid = VisualBatch::new(Array5::zeros((1, 4, 32, 32, 3))).unwrap();
        let (t, tp) = tokenize(ctx, &cfg, &vid).unwrap();
        assert_eq!((g.shape(t), tp), (vec![1, 8, cfg.dim], 2));
        let enc = encode(ctx, &cfg, &vid).unwrap();
        assert_eq!(g.shape(enc.tokens), vec![1, 9, cfg.dim]);
        assert_eq!(enc.token_count(), 9);
    }

    #[test]
    fn zero_frames_and_weights_give_position_encodings() {
        let cfg = ModelConfig::tiny(10);
        let mut store = setup(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for name in ["ve.tok2d.w", "ve.tok2d.b"] {
            store.get_mut(name).unwrap().fill(0.0);
        }
        let pt = store.get_mut("ve.pos_temporal").unwrap();
        pt.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let img = VisualBatch::new(Array5::zeros((1, 1, 16, 16, 3))).unwrap();
        let (t, _) = tokenize(ctx, &cfg, &img).unwrap();
        let tokens = g.value(t).clone();
        let ps = store.get("ve.pos_spatial").unwrap();
        let pt = interpolate_temporal_pos(&crate::graph::to_matrix(store.get("ve.pos_temporal").unwrap()), 1).unwrap();
        for si in 0..cfg.spatial_tokens() {
            for k in 0..cfg.dim {
                assert_eq!(tokens[[0, si, k]], ps[[si + 1, k]] + pt[[0, k]]);
            }
        }
    }

    #[test]
    fn dimension_errors_name_the_axis() {
        let cfg = ModelConfig::tiny(10);
        let store = setup(&cfg, 0);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let bad_h = VisualBatch::new(Array5::zeros((1, 1, 12, 16, 3))).unwrap();
        match tokenize(ctx, &cfg, &bad_h) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "H"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg2 = cfg.clone();
        cfg2.tubelet = 2;
        let bad_t = VisualBatch::new(Array5::zeros((1, 3, 16, 16, 3))).unwrap();
        match tokenize(ctx, &cfg2, &bad_t) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "T"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoints() {
        let pe = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let out = interpolate_temporal_pos(&pe, 3).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.0; 3]);
        assert_eq!(out.row(1).to_vec(), vec![0.5; 3]);
        assert_eq!(out.row(2).to_vec(), vec![1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pe8 = Array2::from_shape_fn((8, 5), |_| rng.random_range(-1.0..1.0));
        assert_eq!(interpolate_temporal_pos(&pe8, 8).unwrap(), pe8);
        assert!(matches!(interpolate_temporal_pos(&pe8, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn interpolation_round_trip_on_time_affine_tables() {
        // Linear resampling is exact on tables that are affine in time.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pe = Array2::from_shape_fn((8, 6), |(t, k)| a[k] + b[k] * t as f64);
        let up = interpolate_temporal_pos(&pe, 16).unwrap();
        let back = interpolate_temporal_pos(&up, 8).unwrap();
        let err = (&back - &pe).iter().fold(0.0f64, |m, e| m.max(e.abs()));
        assert!(err < 1e-6, "round-trip error {err}");
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = ModelConfig::tiny(10);
        let store = setup(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = VisualBatch::new(random_frames(&mut rng, (3, 2, 16, 16, 3))).unwrap();
        let perm = [2, 0, 1];
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store);
        let a = encode(ctx, &cfg, &batch).unwrap().tokens_array(&g);
        let b = encode(ctx, &cfg, &batch.select(&perm)).unwrap().tokens_array(&g);
        for (i, &p) in perm.iter().enumerate() {
            let diff = (&b.index_axis(Axis(0), i) - &a.index_axis(Axis(0), p)).mapv(f64::abs);
            assert!(diff.iter().all(|&e| e < 1e-12));
        }
    }
}
