use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uvl_core::eval::{self, cosine_order, encode_texts, encode_visuals};
use uvl_core::graph::Graph;
use uvl_core::nn::{self, Ctx};
use uvl_core::oracles::{naive_attention, oracle_rank};
use uvl_core::{model, Label, ModelConfig, ParamStore, Vocabulary};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn nested(a: &ArrayD<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.iter().copied().collect()).collect()
}

fn attention_case(causal: bool) {
    let (d, heads, lq, lk) = (8, 2, 5, if causal { 5 } else { 7 });
    let mut rng = ChaCha8Rng::seed_from_u64(if causal { 1 } else { 2 });
    let mut params = ParamStore::new();
    for p in ["q", "k", "v", "o"] {
        params.insert(format!("a.{p}.w"), random(&mut rng, &[d, d]));
        params.insert(format!("a.{p}.b"), random(&mut rng, &[d]));
    }
    let query = random(&mut rng, &[2, lq, d]);
    let memory = if causal { query.clone() } else { random(&mut rng, &[2, lk, d]) };
    let mask = Array2::from_shape_fn((2, lk), |(b, k)| u8::from(!(b == 1 && k + 2 >= lk)));
    let bias = if causal { nn::causal_bias(Some(&mask), lk) } else { nn::key_padding_bias(&mask) };

    let g = Graph::inference();
    let ctx = Ctx::new(&g, &params);
    let out = nn::attention(ctx, "a", g.constant(query.clone()), g.constant(memory.clone()), Some(g.constant(bias)), heads).unwrap();
    let got = g.value(out).clone();

    let w = |n: &str| nested(params.get(&format!("a.{n}.w")).unwrap());
    let b = |n: &str| params.get(&format!("a.{n}.b")).unwrap().iter().copied().collect::<Vec<_>>();
    let (wq, wk, wv, wo) = (w("q"), w("k"), w("v"), w("o"));
    let (bq, bk, bv, bo) = (b("q"), b("k"), b("v"), b("o"));
    for row in 0..2 {
        let keep: Vec<bool> = mask.row(row).iter().map(|&m| m != 0).collect();
        let want = naive_attention(
            &nested(&query.index_axis(Axis(0), row).to_owned()),
            &nested(&memory.index_axis(Axis(0), row).to_owned()),
            (&wq, &bq),
            (&wk, &bk),
            (&wv, &bv),
            (&wo, &bo),
            heads,
            Some(&keep),
            causal,
        );
        for (i, r) in want.iter().enumerate() {
            for (j, x) in r.iter().enumerate() {
                let y = got[[row, i, j]];
                assert!((x - y).abs() < 1e-12, "row {row} ({i}, {j}): {x} vs {y}");
            }
        }
    }
}

#[test]
fn attention_matches_loops_with_padding() {
    attention_case(false);
}

#[test]
fn causal_attention_matches_loops() {
    attention_case(true);
}

struct Gallery {
    cfg: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    items: Vec<Array4<f64>>,
    texts: Vec<String>,
}

fn gallery(n: usize) -> Gallery {
    let texts: Vec<String> = ["a red circle", "a blue square", "a green cross", "a red square moving left"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str));
    let cfg = ModelConfig::tiny(vocab.len());
    let mut params = model::init_params(&cfg, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let noise = Normal::new(0.0, 0.2).unwrap();
    for (_, v) in params.iter_mut() {
        v.mapv_inplace(|x| x + noise.sample(&mut rng));
    }
    let items = (0..n)
        .map(|i| {
            let frames = if i % 3 == 0 { 2 } else { 1 };
            Array4::from_shape_fn((frames, cfg.image_size, cfg.image_size, cfg.channels), |_| rng.random_range(0.0..1.0))
        })
        .collect();
    Gallery { cfg, vocab, params, items, texts }
}

#[test]
fn full_shortlist_equals_exhaustive_ranking_on_mixed_gallery() {
    let gl = gallery(12);
    let refs: Vec<&Array4<f64>> = gl.items.iter().collect();
    let vl: Vec<Label> = (0..12).map(|i| i % 4).collect();
    let tl: Vec<Label> = (0..4).collect();
    let r = eval::retrieve(&gl.params, &gl.cfg, &gl.vocab, &refs, &vl, &gl.texts, &tl, 12).unwrap();
    let want = oracle_rank(&gl.params, &gl.cfg, &gl.vocab, &gl.texts, &gl.items).unwrap();
    assert_eq!(r.t2v.order, want);
}

#[test]
fn unit_shortlist_keeps_cosine_order() {
    let gl = gallery(10);
    let refs: Vec<&Array4<f64>> = gl.items.iter().collect();
    let vl: Vec<Label> = (0..10).map(|i| i % 4).collect();
    let tl: Vec<Label> = (0..4).collect();
    let r = eval::retrieve(&gl.params, &gl.cfg, &gl.vocab, &refs, &vl, &gl.texts, &tl, 1).unwrap();
    let feats = encode_visuals(&gl.params, &gl.cfg, &refs).unwrap();
    let w = encode_texts(&gl.params, &gl.cfg, &gl.vocab, &gl.texts).unwrap();
    assert_eq!(r.t2v.order, cosine_order(&w, &feats.embed));
    assert_eq!(r.v2t.order, cosine_order(&feats.embed, &w));
}

#[test]
fn partial_shortlist_reorders_only_the_head() {
    let gl = gallery(10);
    let refs: Vec<&Array4<f64>> = gl.items.iter().collect();
    let vl: Vec<Label> = (0..10).map(|i| i % 4).collect();
    let tl: Vec<Label> = (0..4).collect();
    let k = 4;
    let r = eval::retrieve(&gl.params, &gl.cfg, &gl.vocab, &refs, &vl, &gl.texts, &tl, k).unwrap();
    let feats = encode_visuals(&gl.params, &gl.cfg, &refs).unwrap();
    let w = encode_texts(&gl.params, &gl.cfg, &gl.vocab, &gl.texts).unwrap();
    for (got, first) in r.t2v.order.iter().zip(cosine_order(&w, &feats.embed)) {
        assert_eq!(got[k..], first[k..]);
        let mut head = got[..k].to_vec();
        let mut want = first[..k].to_vec();
        head.sort_unstable();
        want.sort_unstable();
        assert_eq!(head, want);
    }
}

#[test]
fn batched_encoding_matches_single_items() {
    let gl = gallery(6);
    let refs: Vec<&Array4<f64>> = gl.items.iter().collect();
    let all = encode_visuals(&gl.params, &gl.cfg, &refs).unwrap();
    for (i, item) in gl.items.iter().enumerate() {
        let one = encode_visuals(&gl.params, &gl.cfg, &[item]).unwrap();
        let a: Array3<f64> = one.tokens[0].clone().insert_axis(Axis(0));
        let b: Array3<f64> = all.tokens[i].clone().insert_axis(Axis(0));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!((&one.embed.row(0) - &all.embed.row(i)).iter().all(|x| x.abs() < 1e-12));
    }
}
