//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::time::Instant;

use anyhow::{ensure, Result};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uvl_cli::{cmd_pretrain, CommonArgs, PretrainArgs};
use uvl_core::checkpoint::Checkpoint;
use uvl_core::corpus::{synth_corpus, Modality, SynthConfig};
use uvl_core::eval::{self, AblationConfig, QaConfig};
use uvl_core::generate::{self, GenerationConfig};
use uvl_core::graph::Graph;
use uvl_core::nn::Ctx;
use uvl_core::objectives::{self, KeySet, Label, LossInputs, LossWeights, VlmPair};
use uvl_core::oracles::{self, FD_EPS};
use uvl_core::text::TokenSequence;
use uvl_core::trainer::{lr_at, plan_batches, StageConfig};
use uvl_core::visual::{self, VisualBatch};
use uvl_core::{model, ModelConfig, ParamStore, Paradigm, ScheduleConfig, TrainConfig, Trainer, Vocabulary};

type Check = fn() -> Result<String>;

/// Gradient magnitudes below this are compared on an absolute scale; central
/// differences at `FD_EPS` carry roundoff around 1e-11 per unit of loss.
const GRAD_FLOOR: f64 = 1e-4;

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("contrastive loss equals the explicit-set oracle", c1_oracle_equality),
        ("unique labels with batch-only keys reduce to InfoNCE", c2_infonce_reduction),
        ("analytic gradients match central differences", c3_gradients),
        ("temporal skip and zero-init equivalences", c4_equivalences),
        ("generation decoder is causal", c5_causality),
        ("overfit suite on the 8-triplet corpus", c6_overfit),
        ("full-gallery re-rank equals the exhaustive oracle", c7_rerank_oracle),
        ("paradigm trend on held-out retrieval", c8_paradigm_trend),
        ("schedule contracts and resume", c9_schedule),
        ("seeded pretraining is deterministic", c10_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = check();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {e:#} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f64..1.0));
    for mut r in a.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    a
}

fn fused_univlc(v: &Array2<f64>, w: &Array2<f64>, y: &[Label], keys: &KeySet, log_tau: f64, normalize: bool) -> Result<f64> {
    let g = Graph::inference();
    let loss = objectives::univlc_loss(
        &g,
        g.constant(v.clone().into_dyn()),
        g.constant(w.clone().into_dyn()),
        y,
        keys,
        g.constant(ArrayD::from_elem(IxDyn(&[]), log_tau)),
        normalize,
    )?;
    Ok(g.scalar(loss))
}

fn c1_oracle_equality() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let b = rng.random_range(1..=8);
        let m = rng.random_range(0..=32);
        let d = rng.random_range(2..=16);
        let classes = rng.random_range(1..=6);
        let v = unit_rows(&mut rng, b, d);
        let w = unit_rows(&mut rng, b, d);
        let y: Vec<Label> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let bank_v = unit_rows(&mut rng, m, d);
        let bank_w = unit_rows(&mut rng, m, d);
        let bank_y: Vec<Label> = (0..m).map(|_| rng.random_range(0..classes + 2)).collect();
        let keys = KeySet {
            visual: ndarray::concatenate![ndarray::Axis(0), v, bank_v],
            text: ndarray::concatenate![ndarray::Axis(0), w, bank_w],
            labels: y.iter().chain(&bank_y).copied().collect(),
        };
        let log_tau = rng.random_range(0.01f64..0.5).ln();
        let normalize = case % 2 == 0;
        let got = fused_univlc(&v, &w, &y, &keys, log_tau, normalize)?;
        let want = oracles::oracle_univlc(
            &rows(&v),
            &rows(&w),
            &y,
            &rows(&keys.visual),
            &rows(&keys.text),
            &keys.labels,
            log_tau.exp(),
            normalize,
        );
        worst = worst.max((got - want).abs());
    }
    ensure!(worst <= 1e-10, "max |fused - oracle| = {worst:e} > 1e-10");
    Ok(format!("50 instances, max abs deviation {worst:e} (tol 1e-10)"))
}

fn c2_infonce_reduction() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let v = unit_rows(&mut rng, b, d);
        let w = unit_rows(&mut rng, b, d);
        let y: Vec<Label> = (0..b as u64).collect();
        let keys = KeySet {
            visual: v.clone(),
            text: w.clone(),
            labels: y.clone(),
        };
        let tau = rng.random_range(0.01f64..0.5);
        let got = fused_univlc(&v, &w, &y, &keys, tau.ln(), true)?;
        let want = oracles::infonce(&rows(&v), &rows(&w), tau.ln().exp());
        worst = worst.max((got - want).abs());
    }
    ensure!(worst <= 1e-12, "max |UniVLC - InfoNCE| = {worst:e} > 1e-12");
    Ok(format!("20 instances, max abs deviation {worst:e} (tol 1e-12)"))
}

struct GradFixture {
    cfg: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    batch: VisualBatch,
    texts: Vec<String>,
    labels: Vec<Label>,
    keys: KeySet,
    pairs: Vec<VlmPair>,
}

/// Toy model at a random point: every parameter is jittered so zero-initialised
/// paths carry gradient too.
fn jittered_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ParamStore {
    let mut params = model::init_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let noise = Normal::new(0.0, scale).expect("valid sigma");
    for (_, v) in params.iter_mut() {
        v.mapv_inplace(|x| x + noise.sample(&mut rng));
    }
    params
}

fn random_visual(rng: &mut ChaCha8Rng, cfg: &ModelConfig, frames: usize) -> Array4<f64> {
    Array4::from_shape_fn((frames, cfg.image_size, cfg.image_size, cfg.channels), |_| rng.random_range(0.0..1.0))
}

fn grad_fixture(frames: usize) -> Result<GradFixture> {
    let texts: Vec<String> = ["a red circle", "a blue square", "a red circle", "a green cross moving left"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str));
    let cfg = ModelConfig::tiny(vocab.len());
    let params = jittered_params(&cfg, 7, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let items: Vec<Array4<f64>> = (0..texts.len()).map(|_| random_visual(&mut rng, &cfg, frames)).collect();
    let batch = VisualBatch::stack(&items.iter().collect::<Vec<_>>())?;
    let keys = KeySet {
        visual: unit_rows(&mut rng, 6, cfg.proj_dim),
        text: unit_rows(&mut rng, 6, cfg.proj_dim),
        labels: vec![0, 1, 0, 2, 4, 1],
    };
    let pairs = vec![
        VlmPair { partner: 2, target: true },
        VlmPair { partner: 0, target: false },
        VlmPair { partner: 2, target: true },
        VlmPair { partner: 1, target: false },
    ];
    Ok(GradFixture {
        cfg,
        vocab,
        params,
        batch,
        texts,
        labels: vec![0, 1, 0, 2],
        keys,
        pairs,
    })
}

fn fixture_loss(fx: &GradFixture, params: &ParamStore, weights: LossWeights, with_grads: bool) -> Result<(f64, std::collections::BTreeMap<String, ArrayD<f64>>)> {
    let g = if with_grads { Graph::new() } else { Graph::inference() };
    let ctx = Ctx::new(&g, params);
    let inputs = LossInputs {
        visual: &fx.batch,
        texts: &fx.texts,
        labels: &fx.labels,
        keys: &fx.keys,
        pairs: &fx.pairs,
    };
    let terms = objectives::total_loss(ctx, &fx.cfg, &fx.vocab, &inputs, weights, true)?;
    let value = g.scalar(terms.total);
    if !with_grads {
        return Ok((value, Default::default()));
    }
    let grads = g.backward(terms.total);
    Ok((value, g.param_grads(&grads)))
}

fn max_fd_error(frames: usize, weights: LossWeights) -> Result<(f64, usize)> {
    let fx = grad_fixture(frames)?;
    let (_, analytic) = fixture_loss(&fx, &fx.params, weights, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    let mut count = 0;
    let names: Vec<String> = fx.params.names().map(String::from).collect();
    for name in names {
        let n = fx.params.get(&name)?.len();
        let k = rng.random_range(0..n);
        let eval = |delta: f64| -> Result<f64> {
            let mut p = fx.params.clone();
            if let Some(x) = p.get_mut(&name)?.iter_mut().nth(k) {
                *x += delta;
            }
            Ok(fixture_loss(&fx, &p, weights, false)?.0)
        };
        let numeric = (eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS);
        let a = analytic.get(&name).and_then(|g| g.iter().nth(k).copied()).unwrap_or(0.0);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR));
        count += 1;
    }
    Ok((worst, count))
}

fn c3_gradients() -> Result<String> {
    let cases = [
        ("univlc", 1, LossWeights { univlc: 1.0, vlm: 0.0, lm: 0.0 }),
        ("vlm", 1, LossWeights { univlc: 0.0, vlm: 1.0, lm: 0.0 }),
        ("lm", 1, LossWeights { univlc: 0.0, vlm: 0.0, lm: 1.0 }),
        ("total (video)", 2, LossWeights { univlc: 1.0, vlm: 0.7, lm: 0.3 }),
    ];
    let mut parts = Vec::new();
    for (name, frames, w) in cases {
        let (worst, count) = max_fd_error(frames, w)?;
        ensure!(worst <= 1e-4, "{name}: max relative error {worst:e} > 1e-4");
        parts.push(format!("{name} {worst:.1e} over {count}"));
    }
    Ok(format!("max relative error: {} (tol 1e-4)", parts.join(", ")))
}

fn encode_cls(params: &ParamStore, cfg: &ModelConfig, item: &Array4<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = Graph::inference();
    let enc = visual::encode(Ctx::new(&g, params), cfg, &VisualBatch::stack(&[item])?)?;
    let tokens = enc.tokens_array(&g).iter().copied().collect();
    Ok((enc.cls_array(&g).iter().copied().collect(), tokens))
}

fn c4_equivalences() -> Result<String> {
    let vocab = Vocabulary::build(["x"]);
    let with = ModelConfig::tiny(vocab.len());
    let params = jittered_params(&with, 31, 0.05);
    let without = ModelConfig {
        temporal_attention: false,
        ..with.clone()
    };
    let mut stripped = ParamStore::new();
    for (n, v) in params.iter() {
        if !n.contains(".temporal.") {
            stripped.insert(n.clone(), v.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..4 {
        let item = random_visual(&mut rng, &with, 1);
        let a = encode_cls(&params, &with, &item)?;
        let b = encode_cls(&stripped, &without, &item)?;
        ensure!(a == b, "T=1 forward differs with temporal sublayers present");
    }

    let mut worst = 0.0f64;
    for tubelet in [1, 2] {
        let cfg = ModelConfig {
            tubelet,
            max_frames: 4,
            ..ModelConfig::desk(vocab.len())
        };
        let fresh = model::init_params(&cfg, 5);
        for _ in 0..3 {
            let image = random_visual(&mut rng, &cfg, 1);
            let frame = image.index_axis(ndarray::Axis(0), 0).to_owned();
            let video = ndarray::stack(ndarray::Axis(0), &[frame.view(); 4])?;
            let (ci, _) = encode_cls(&fresh, &cfg, &image)?;
            let (cv, _) = encode_cls(&fresh, &cfg, &video)?;
            for (x, y) in ci.iter().zip(&cv) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure!(worst <= 1e-5, "duplicated-frame v_cls deviates by {worst:e} > 1e-5");
    Ok(format!("(a) exact on 4 inputs; (b) max |v_cls video - image| {worst:e} (tol 1e-5)"))
}

fn c5_causality() -> Result<String> {
    let words = ["a", "picture", "of", "red", "blue", "circle", "square", "moving"];
    let vocab = Vocabulary::build(words);
    let cfg = ModelConfig::tiny(vocab.len());
    let params = jittered_params(&cfg, 53, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let len = cfg.max_text_len;
    let v = vocab.len();
    let logits_for = |ids: &Array2<usize>, item: &Array4<f64>| -> Result<ArrayD<f64>> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &params);
        let enc = visual::encode(ctx, &cfg, &VisualBatch::stack(&[item])?)?;
        let seq = TokenSequence {
            ids: ids.clone(),
            mask: Array2::ones(ids.raw_dim()),
        };
        let out = generate::decode_logits(ctx, &cfg, &seq, &enc)?;
        Ok(generate::logits_array(&g, out))
    };
    for _ in 0..20 {
        let item = random_visual(&mut rng, &cfg, 1);
        let ids = Array2::from_shape_fn((1, len), |(_, p)| if p == 0 { 3 } else { rng.random_range(6..v) });
        let l = rng.random_range(0..len - 1);
        let mut perturbed = ids.clone();
        for p in l + 1..len {
            perturbed[[0, p]] = rng.random_range(6..v);
        }
        perturbed[[0, len - 1]] = (ids[[0, len - 1]] - 6 + 1) % (v - 6) + 6;
        let a = logits_for(&ids, &item)?;
        let b = logits_for(&perturbed, &item)?;
        for pos in 0..=l {
            let ra = a.index_axis(ndarray::Axis(1), pos);
            let rb = b.index_axis(ndarray::Axis(1), pos);
            ensure!(ra == rb, "logits at position {pos} changed after perturbing positions > {l}");
        }
    }
    Ok("20 random (position, perturbation) pairs, bitwise identical prefixes".into())
}

fn c6_overfit() -> Result<String> {
    let corpus = synth_corpus(&SynthConfig {
        n_classes: 8,
        n_per_class: 1,
        seed: 0,
        ..Default::default()
    })?;
    ensure!(corpus.triplets.len() == 8, "corpus has {} triplets", corpus.triplets.len());
    let vocab = corpus.vocabulary();
    let mut sched = ScheduleConfig::desk(Paradigm::ImageOnly);
    sched.stage1.steps = Some(250);
    sched.stage2.steps = Some(250);
    sched.stage1.peak_lr = 1e-3;
    sched.stage2.peak_lr = 5e-4;
    sched.batch_image = 8;
    let mut cfg = TrainConfig::new(ModelConfig::desk(vocab.len()), sched);
    cfg.bank_size = 32;
    let mut trainer = Trainer::new(cfg.clone(), &corpus, &vocab)?;
    let steps = trainer.total_steps();
    trainer.run(|_, _| Ok(()))?;
    let params = trainer.into_state().params;

    let r = eval::retrieve_corpus(&params, &cfg.model, &vocab, &corpus, 128)?;
    ensure!(
        r.t2v.recall.r1 == 1.0 && r.v2t.recall.r1 == 1.0,
        "train R@1 t2v {} v2t {}",
        r.t2v.recall.r1,
        r.v2t.recall.r1
    );
    let gen = GenerationConfig::greedy(16, "");
    let (_, captions) = eval::caption_corpus(&params, &cfg.model, &vocab, &corpus, &gen)?;
    for (c, t) in captions.iter().zip(&corpus.triplets) {
        ensure!(*c == t.text, "caption `{c}` differs from reference `{}`", t.text);
    }
    let pairs = corpus.qa_pairs();
    let qa = QaConfig {
        steps: 100,
        lr: 5e-4,
        batch: 8,
        seed: 0,
    };
    let tuned = eval::finetune_qa(&params, &cfg.model, &vocab, &corpus, &pairs, &qa)?;
    let acc = eval::qa_accuracy(&tuned, &cfg.model, &vocab, &corpus, &pairs, &gen)?;
    ensure!(acc == 1.0, "QA accuracy {acc}");
    Ok(format!(
        "{steps} pretraining steps: R@1 1.0 both directions, 8/8 exact captions, QA 1.0 after {} fine-tuning steps",
        qa.steps
    ))
}

fn c7_rerank_oracle() -> Result<String> {
    let texts: Vec<String> = [
        "a picture of a red circle",
        "a picture of a blue square",
        "a photo of a green cross",
        "a video of a red circle moving left",
        "a picture of a yellow triangle",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str));
    let cfg = ModelConfig::tiny(vocab.len());
    let params = jittered_params(&cfg, 67, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let gallery: Vec<Array4<f64>> = (0..32).map(|_| random_visual(&mut rng, &cfg, 1)).collect();
    let refs: Vec<&Array4<f64>> = gallery.iter().collect();
    let vlabels: Vec<Label> = (0..32).map(|i| i % 5).collect();
    let tlabels: Vec<Label> = (0..5).collect();
    let report = eval::retrieve(&params, &cfg, &vocab, &refs, &vlabels, &texts, &tlabels, gallery.len())?;
    let oracle = oracles::oracle_rank(&params, &cfg, &vocab, &texts, &gallery)?;
    ensure!(report.t2v.order == oracle, "re-ranked order differs from the exhaustive ranking");
    Ok(format!("{} queries over a 32-item gallery, identical orderings", texts.len()))
}

fn c8_paradigm_trend() -> Result<String> {
    let train = synth_corpus(&SynthConfig {
        n_classes: 8,
        n_per_class: 50,
        video_fraction: 0.5,
        seed: 1,
        ..Default::default()
    })?;
    let held = synth_corpus(&SynthConfig {
        n_classes: 8,
        n_per_class: 50,
        video_fraction: 0.5,
        seed: 1001,
        ..Default::default()
    })?;
    ensure!(
        train.count(Modality::Image) == 200 && train.count(Modality::Video) == 200,
        "training corpus is not 200 + 200"
    );
    let vocab = Vocabulary::build(train.triplets.iter().chain(&held.triplets).map(|t| t.text.as_str()));
    let mut sched = ScheduleConfig::desk(Paradigm::Decoupled);
    sched.stage1.steps = Some(200);
    sched.stage2.steps = Some(100);
    sched.stage1.peak_lr = 1e-3;
    sched.stage2.peak_lr = 1e-3 * 8e-5 / 3e-4;
    sched.batch_image = 16;
    sched.batch_video = 16;
    let mut cfg = TrainConfig::new(ModelConfig::desk(vocab.len()), sched);
    cfg.bank_size = 256;
    let ab = AblationConfig {
        train: cfg,
        paradigms: vec![Paradigm::Decoupled, Paradigm::JointScratch, Paradigm::ImageOnly],
        seeds: vec![0, 1, 2],
        k: 16,
        gen_max_len: 12,
        qa: None,
        caption: false,
    };
    let table = eval::ablate_paradigms(&ab, &vocab, &train, &held)?;
    let get = |p: Paradigm| table.row(p).ok_or_else(|| anyhow::anyhow!("missing row for {p}"));
    let dec = get(Paradigm::Decoupled)?;
    let joint = get(Paradigm::JointScratch)?;
    let img = get(Paradigm::ImageOnly)?;
    let r = |x: Option<f64>| x.unwrap_or(f64::NAN);
    let (dv, jv, iv) = (r(dec.video_r1()), r(joint.video_r1()), r(img.video_r1()));
    let (di, ji) = (r(dec.image_r1()), r(joint.image_r1()));
    let summary = format!(
        "video R@1 decoupled {dv:.4} / joint_scratch {jv:.4} / image_only {iv:.4}; image R@1 decoupled {di:.4} / joint_scratch {ji:.4}"
    );
    ensure!(dv >= jv && dv >= iv && di >= ji, "{summary}");
    Ok(summary)
}

fn tiny_schedule(paradigm: Paradigm) -> ScheduleConfig {
    let stage = StageConfig {
        epochs: 1,
        steps: Some(4),
        peak_lr: 1e-3,
        warmup_steps: 2,
        decay_rate: 0.85,
    };
    ScheduleConfig {
        paradigm,
        stage1: stage.clone(),
        stage2: stage,
        batch_image: 4,
        batch_video: 4,
    }
}

fn c9_schedule() -> Result<String> {
    let sched = ScheduleConfig {
        stage1: StageConfig {
            steps: None,
            epochs: 2,
            ..tiny_schedule(Paradigm::Decoupled).stage1
        },
        stage2: StageConfig {
            steps: None,
            epochs: 2,
            ..tiny_schedule(Paradigm::Decoupled).stage2
        },
        ..tiny_schedule(Paradigm::Decoupled)
    };
    let plan = plan_batches(&sched, 12, 6, 3)?;
    let stage2: Vec<Modality> = plan.iter().filter(|b| b.stage == 1).map(|b| b.modality).collect();
    ensure!(plan.iter().filter(|b| b.stage == 0).all(|b| b.modality == Modality::Image), "stage 1 saw video");
    ensure!(
        stage2.iter().enumerate().all(|(i, &m)| m == if i % 2 == 0 { Modality::Image } else { Modality::Video }),
        "stage 2 does not alternate image/video starting with image: {stage2:?}"
    );
    ensure!(plan.windows(2).all(|w| w[0].stage <= w[1].stage), "stages interleave");

    let st = StageConfig {
        epochs: 1,
        steps: None,
        peak_lr: 3e-4,
        warmup_steps: 10,
        decay_rate: 0.85,
    };
    let n = 100;
    ensure!(lr_at(0, n, &st) == 0.0, "lr at step 0 is {}", lr_at(0, n, &st));
    ensure!((lr_at(10, n, &st) - 3e-4).abs() <= 1e-15, "lr at warmup end is {}", lr_at(10, n, &st));
    ensure!((lr_at(n - 1, n, &st) - 3e-4 * 0.85).abs() <= 1e-15, "lr at stage end is {}", lr_at(n - 1, n, &st));

    let corpus = synth_corpus(&SynthConfig {
        n_classes: 4,
        n_per_class: 4,
        video_fraction: 0.5,
        image_size: 16,
        frames: 2,
        seed: 9,
        ..Default::default()
    })?;
    let vocab = corpus.vocabulary();
    let model_cfg = ModelConfig {
        max_text_len: 16,
        ..ModelConfig::tiny(vocab.len())
    };
    let mut cfg = TrainConfig::new(model_cfg, tiny_schedule(Paradigm::Decoupled));
    cfg.bank_size = 16;
    let mut trainer = Trainer::new(cfg.clone(), &corpus, &vocab)?;
    let start = model::init_params(&cfg.model, cfg.seed);
    let video_only: Vec<String> = start
        .names()
        .filter(|n| n.contains(".temporal.") || n.starts_with("ve.tok3d"))
        .map(String::from)
        .collect();
    for _ in 0..4 {
        trainer.step()?;
    }
    for n in &video_only {
        ensure!(
            trainer.state.params.get(n)? == start.get(n)?,
            "video-only parameter `{n}` moved during the image stage"
        );
    }

    let mut straight = Trainer::new(cfg.clone(), &corpus, &vocab)?;
    let mut reference = Vec::new();
    while !straight.is_done() {
        reference.push(straight.step()?.loss_total);
    }
    let mut first = Trainer::new(cfg.clone(), &corpus, &vocab)?;
    for _ in 0..3 {
        first.step()?;
    }
    let bytes = Checkpoint::from_state(&first.into_state(), &cfg, &vocab).to_bytes();
    let ck = Checkpoint::from_bytes(&bytes)?;
    ck.check_config(&cfg)?;
    let restored_vocab = ck.vocabulary()?;
    let mut resumed = Trainer::resume(cfg.clone(), &corpus, &restored_vocab, ck.to_state()?)?;
    let mut worst = 0.0f64;
    let mut k = 3;
    while !resumed.is_done() {
        worst = worst.max((resumed.step()?.loss_total - reference[k]).abs());
        k += 1;
    }
    ensure!(k == reference.len() && worst <= 1e-6, "resumed losses deviate by {worst:e}");
    Ok(format!(
        "alternation, lr endpoints, {} video-only params frozen in stage 1, resume deviation {worst:e} (tol 1e-6)",
        video_only.len()
    ))
}

fn c10_determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let run = |name: &str| -> Result<Vec<u8>> {
        let out = dir.path().join(name);
        let args = PretrainArgs {
            common: CommonArgs {
                config: None,
                seed: Some(4),
                outdir: out,
                overrides: [
                    "model.dim=16",
                    "model.heads=2",
                    "model.visual_depth=1",
                    "model.text_depth=1",
                    "model.decoder_depth=1",
                    "model.image_size=16",
                    "model.patch_size=8",
                    "model.max_frames=4",
                    "synth.classes=4",
                    "synth.per_class=4",
                    "synth.frames=2",
                    "schedule.batch_image=4",
                    "schedule.batch_video=4",
                    "schedule.stage1.steps=3",
                    "schedule.stage2.steps=3",
                    "train.bank_size=16",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            },
            resume: None,
        };
        let summary = cmd_pretrain(&args)?;
        Ok(std::fs::read(summary.metrics)?)
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure!(!a.is_empty(), "metrics file is empty");
    ensure!(a == b, "metrics files differ");
    Ok(format!("{} metric lines, byte-identical", a.iter().filter(|&&c| c == b'\n').count()))
}
