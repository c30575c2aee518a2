//! Two-stage pretraining: schedule and batch plan, learning-rate curve,
//! AdamW, and the training step (momentum keys, losses, update, EMA,
//! enqueue).

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::{Corpus, Modality};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model;
use crate::nn::Ctx;
use crate::objectives::{self, Label, LossInputs, LossWeights, MemoryBank};
use crate::params::ParamStore;
use crate::text::{self, Special, Vocabulary};
use crate::visual::{self, VisualBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Image stage, then joint image+video stage.
    Decoupled,
    ImageOnly,
    VideoOnly,
    /// Joint image+video from the first step.
    JointScratch,
    /// Image stage, then video-only stage.
    Img2Vid,
}

impl Paradigm {
    pub const ALL: [Paradigm; 5] = [
        Paradigm::Decoupled,
        Paradigm::ImageOnly,
        Paradigm::VideoOnly,
        Paradigm::JointScratch,
        Paradigm::Img2Vid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Decoupled => "decoupled",
            Paradigm::ImageOnly => "image_only",
            Paradigm::VideoOnly => "video_only",
            Paradigm::JointScratch => "joint_scratch",
            Paradigm::Img2Vid => "img2vid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("schedule.paradigm: unknown paradigm `{s}`")))
    }

    /// Data sources of the two stages.
    pub fn stage_sources(self) -> [Sources; 2] {
        use Sources as S;
        match self {
            Paradigm::Decoupled => [S::IMAGE, S::JOINT],
            Paradigm::ImageOnly => [S::IMAGE, S::IMAGE],
            Paradigm::VideoOnly => [S::VIDEO, S::VIDEO],
            Paradigm::JointScratch => [S::JOINT, S::JOINT],
            Paradigm::Img2Vid => [S::IMAGE, S::VIDEO],
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sources {
    pub image: bool,
    pub video: bool,
}

impl Sources {
    pub const IMAGE: Sources = Sources { image: true, video: false };
    pub const VIDEO: Sources = Sources { image: false, video: true };
    pub const JOINT: Sources = Sources { image: true, video: true };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    /// Fixed step count; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub decay_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub paradigm: Paradigm,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub batch_image: usize,
    pub batch_video: usize,
}

impl ScheduleConfig {
    pub fn desk(paradigm: Paradigm) -> Self {
        Self {
            paradigm,
            stage1: StageConfig {
                epochs: 4,
                steps: None,
                peak_lr: 3e-4,
                warmup_steps: 10,
                decay_rate: 0.85,
            },
            stage2: StageConfig {
                epochs: 2,
                steps: None,
                peak_lr: 8e-5,
                warmup_steps: 10,
                decay_rate: 0.85,
            },
            batch_image: 16,
            batch_video: 8,
        }
    }

    pub fn stage(&self, i: usize) -> &StageConfig {
        if i == 0 {
            &self.stage1
        } else {
            &self.stage2
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, st) in [&self.stage1, &self.stage2].into_iter().enumerate() {
            let key = format!("schedule.stage{}", i + 1);
            if !(st.peak_lr.is_finite() && st.peak_lr >= 0.0) {
                return Err(Error::Config(format!("{key}.peak_lr must be finite and non-negative")));
            }
            if !(0.0..=1.0).contains(&st.decay_rate) {
                return Err(Error::Config(format!("{key}.decay_rate must lie in [0, 1]")));
            }
        }
        if self.batch_image < 2 || self.batch_video < 2 {
            return Err(Error::Config("schedule.batch_image and schedule.batch_video must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// One optimisation step of the plan. `indices` point into the list of
/// triplets of `modality`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedBatch {
    pub stage: usize,
    pub step_in_stage: usize,
    pub stage_steps: usize,
    pub modality: Modality,
    pub indices: Vec<usize>,
}

/// SplitMix64 mix of a seed with a path of integers.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in std::iter::once(&0x5eed).chain(parts) {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let b = batch.min(n);
    perm.chunks_exact(b).map(<[usize]>::to_vec).collect()
}

/// Deterministic batch order for the whole schedule. Single-source stages
/// reshuffle every epoch. Joint stages alternate image and video batches,
/// starting with image; the modality with fewer batches per epoch cycles
/// through fresh permutations to keep the alternation going.
pub fn plan_batches(schedule: &ScheduleConfig, n_image: usize, n_video: usize, seed: u64) -> Result<Vec<PlannedBatch>> {
    schedule.validate()?;
    let mut plan = Vec::new();
    for (stage, sources) in schedule.paradigm.stage_sources().into_iter().enumerate() {
        let st = schedule.stage(stage);
        if st.steps == Some(0) || (st.steps.is_none() && st.epochs == 0) {
            continue;
        }
        for (on, n, what) in [(sources.image, n_image, "image"), (sources.video, n_video, "video")] {
            if on && n < 2 {
                return Err(Error::Config(format!(
                    "stage {} of `{}` needs at least 2 {what} triplets, corpus has {n}",
                    stage + 1,
                    schedule.paradigm
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stage as u64]));
        let mut steps: Vec<(Modality, Vec<usize>)> = Vec::new();
        let mut epoch = 0;
        loop {
            match st.steps {
                Some(target) if steps.len() >= target => break,
                None if epoch == st.epochs => break,
                _ => {}
            }
            let img = |rng: &mut ChaCha8Rng| shuffled_batches(n_image, schedule.batch_image, rng);
            let vid = |rng: &mut ChaCha8Rng| shuffled_batches(n_video, schedule.batch_video, rng);
            match (sources.image, sources.video) {
                (true, false) => steps.extend(img(&mut rng).into_iter().map(|b| (Modality::Image, b))),
                (false, true) => steps.extend(vid(&mut rng).into_iter().map(|b| (Modality::Video, b))),
                _ => {
                    let mut ib = img(&mut rng);
                    let mut vb = vid(&mut rng);
                    let k = ib.len().max(vb.len());
                    while ib.len() < k {
                        ib.extend(img(&mut rng));
                    }
                    while vb.len() < k {
                        vb.extend(vid(&mut rng));
                    }
                    for (i, v) in ib.into_iter().zip(vb).take(k) {
                        steps.push((Modality::Image, i));
                        steps.push((Modality::Video, v));
                    }
                }
            }
            epoch += 1;
        }
        if let Some(target) = st.steps {
            steps.truncate(target);
        }
        let stage_steps = steps.len();
        plan.extend(steps.into_iter().enumerate().map(|(k, (modality, indices))| PlannedBatch {
            stage,
            step_in_stage: k,
            stage_steps,
            modality,
            indices,
        }));
    }
    Ok(plan)
}

/// Linear warmup from 0 to the peak over `warmup_steps`, then linear decay
/// reaching `peak·decay_rate` at the stage's last step.
pub fn lr_at(step_in_stage: usize, stage_steps: usize, st: &StageConfig) -> f64 {
    let s = step_in_stage as f64;
    if step_in_stage < st.warmup_steps {
        return st.peak_lr * s / st.warmup_steps as f64;
    }
    let last = stage_steps.saturating_sub(1);
    if last <= st.warmup_steps {
        return st.peak_lr;
    }
    let frac = (s - st.warmup_steps as f64) / (last - st.warmup_steps) as f64;
    st.peak_lr * (1.0 - frac.min(1.0) * (1.0 - st.decay_rate))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
    pub t: u64,
}

/// AdamW with decoupled weight decay on matrices (rank ≥ 2). Parameters
/// without a gradient in a step are left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) -> Result<()> {
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != grad.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    detail: format!("gradient {:?} vs parameter {:?}", grad.shape(), p.shape()),
                });
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: ArrayD::zeros(p.raw_dim()),
                v: ArrayD::zeros(p.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(slot.t as i32);
            let c2 = 1.0 - b2.powi(slot.t as i32);
            let decay = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let eps = self.eps;
            Zip::from(&mut *p)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// EMA coefficient of the momentum encoders.
    pub momentum: f64,
    pub bank_size: usize,
    pub weights: LossWeights,
    pub normalize_positives: bool,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, schedule: ScheduleConfig) -> Self {
        Self {
            model,
            schedule,
            seed: 0,
            momentum: 0.995,
            bank_size: 1024,
            weights: LossWeights::default(),
            normalize_positives: true,
            weight_decay: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1]".into()));
        }
        if self.bank_size == 0 {
            return Err(Error::Config("train.bank_size must be positive".into()));
        }
        let largest = self.schedule.batch_image.max(self.schedule.batch_video);
        if self.bank_size < largest {
            return Err(Error::Config(format!(
                "train.bank_size ({}) must be at least the largest batch ({largest})",
                self.bank_size
            )));
        }
        let w = self.weights;
        if [w.univlc, w.vlm, w.lm].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub momentum: ParamStore,
    pub bank: MemoryBank,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Self {
        let params = model::init_params(&cfg.model, cfg.seed);
        Self {
            momentum: model::init_momentum(&params),
            params,
            bank: MemoryBank::new(cfg.bank_size, cfg.model.proj_dim),
            optimizer: AdamW::new(cfg.weight_decay),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: usize,
    pub modality: Modality,
    pub loss_total: f64,
    pub loss_univlc: f64,
    pub loss_vlm: f64,
    pub loss_lm: f64,
    pub lr: f64,
    pub tau: f64,
}

// ln 0.001 and ln 0.5
const LOG_TAU_RANGE: (f64, f64) = (-6.907_755_278_982_137, -std::f64::consts::LN_2);

pub struct Trainer<'a> {
    cfg: TrainConfig,
    corpus: &'a Corpus,
    vocab: &'a Vocabulary,
    plan: Vec<PlannedBatch>,
    image_idx: Vec<usize>,
    video_idx: Vec<usize>,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, corpus: &'a Corpus, vocab: &'a Vocabulary) -> Result<Self> {
        let state = TrainState::init(&cfg);
        Self::resume(cfg, corpus, vocab, state)
    }

    pub fn resume(cfg: TrainConfig, corpus: &'a Corpus, vocab: &'a Vocabulary, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but the vocabulary has {} tokens",
                cfg.model.vocab_size,
                vocab.len()
            )));
        }
        let image_idx = corpus.indices(Modality::Image);
        let video_idx = corpus.indices(Modality::Video);
        let plan = plan_batches(&cfg.schedule, image_idx.len(), video_idx.len(), cfg.seed)?;
        if state.step > plan.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {} but the schedule has {} steps",
                state.step,
                plan.len()
            )));
        }
        for t in &corpus.triplets {
            let frames = t.visual.clone().insert_axis(ndarray::Axis(0));
            VisualBatch::new(frames)?.validate(&cfg.model)?;
        }
        Ok(Self {
            cfg,
            corpus,
            vocab,
            plan,
            image_idx,
            video_idx,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &[PlannedBatch] {
        &self.plan
    }

    pub fn total_steps(&self) -> usize {
        self.plan.len()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.plan.len()
    }

    /// Index of the first stage that draws video, when it is not the first
    /// scheduled stage.
    fn video_entry_stage(&self) -> Option<usize> {
        let first_stage = self.plan.first()?.stage;
        let first_video = self.plan.iter().find(|b| b.modality == Modality::Video)?.stage;
        (first_video > first_stage).then_some(first_video)
    }

    fn on_stage_start(&mut self, desc: &PlannedBatch) -> Result<()> {
        if desc.step_in_stage != 0 {
            return Ok(());
        }
        self.state.bank.reset();
        if self.video_entry_stage() == Some(desc.stage) {
            visual::inflate_video_tokenizer(&mut self.state.params, &self.cfg.model)?;
            for name in ["ve.tok3d.w", "ve.tok3d.b"] {
                let live = self.state.params.get(name)?.clone();
                self.state.momentum.insert(name, live);
            }
        }
        Ok(())
    }

    /// Runs the next planned step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let desc = self
            .plan
            .get(step)
            .cloned()
            .ok_or_else(|| Error::Argument(format!("schedule finished after {} steps", self.plan.len())))?;
        self.on_stage_start(&desc)?;

        let pool = match desc.modality {
            Modality::Image => &self.image_idx,
            Modality::Video => &self.video_idx,
        };
        let items: Vec<usize> = desc.indices.iter().map(|&i| pool[i]).collect();
        let visuals: Vec<_> = items.iter().map(|&i| &self.corpus.triplets[i].visual).collect();
        let batch = VisualBatch::stack(&visuals)?;
        let texts: Vec<String> = items.iter().map(|&i| self.corpus.triplets[i].text.clone()).collect();
        let labels: Vec<Label> = items.iter().map(|&i| self.corpus.triplets[i].label).collect();
        let model_cfg = &self.cfg.model;

        let cls_text = text::tokenize_batch(&texts, self.vocab, Special::Cls, false, model_cfg.max_text_len)?;
        let (v_m, w_m) = objectives::momentum_embed(&self.state.momentum, model_cfg, &batch, &cls_text)?;
        let keys = self.state.bank.keys_with_batch(&v_m, &w_m, &labels);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[step as u64, 1]));
        let pairs = objectives::sample_vlm_pairs(&mut rng, &labels)?;

        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.state.params);
        let inputs = LossInputs {
            visual: &batch,
            texts: &texts,
            labels: &labels,
            keys: &keys,
            pairs: &pairs,
        };
        let terms = objectives::total_loss(ctx, model_cfg, self.vocab, &inputs, self.cfg.weights, self.cfg.normalize_positives)?;
        let values = terms.values(&g);
        if !values.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(terms.total);
        let param_grads = g.param_grads(&grads);
        drop(grads);
        drop(g);

        let st = self.cfg.schedule.stage(desc.stage);
        let lr = lr_at(desc.step_in_stage, desc.stage_steps, st);
        self.state.optimizer.step(&mut self.state.params, &param_grads, lr)?;
        let log_tau = self.state.params.get_mut(model::LOG_TAU)?;
        log_tau.mapv_inplace(|x| x.clamp(LOG_TAU_RANGE.0, LOG_TAU_RANGE.1));
        objectives::momentum_step(&self.state.params, &mut self.state.momentum, self.cfg.momentum)?;
        self.state.bank.enqueue(&v_m, &w_m, &labels)?;
        self.state.step += 1;

        Ok(StepMetrics {
            step,
            stage: desc.stage,
            modality: desc.modality,
            loss_total: values.total,
            loss_univlc: values.univlc,
            loss_vlm: values.vlm,
            loss_lm: values.lm,
            lr,
            tau: model::temperature(&self.state.params)?,
        })
    }

    /// Runs to the end of the plan, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics, &TrainState) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let m = self.step()?;
            on_step(&m, &self.state)?;
        }
        Ok(())
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(epochs: usize, steps: Option<usize>) -> StageConfig {
        StageConfig {
            epochs,
            steps,
            peak_lr: 1e-3,
            warmup_steps: 0,
            decay_rate: 0.85,
        }
    }

    fn schedule(paradigm: Paradigm, e1: usize, e2: usize, bi: usize, bv: usize) -> ScheduleConfig {
        ScheduleConfig {
            paradigm,
            stage1: stage(e1, None),
            stage2: stage(e2, None),
            batch_image: bi,
            batch_video: bv,
        }
    }

    #[test]
    fn joint_stage_alternates_and_stage_one_is_image_only() {
        let s = schedule(Paradigm::Decoupled, 1, 1, 2, 2);
        let plan = plan_batches(&s, 4, 4, 0).unwrap();
        let mods: Vec<_> = plan.iter().map(|b| (b.stage, b.modality)).collect();
        use Modality::*;
        assert_eq!(mods, vec![(0, Image), (0, Image), (1, Image), (1, Video), (1, Image), (1, Video)]);
    }

    #[test]
    fn shorter_modality_cycles() {
        let s = schedule(Paradigm::JointScratch, 1, 0, 2, 2);
        let plan = plan_batches(&s, 8, 2, 3).unwrap();
        assert_eq!(plan.len(), 8);
        assert!(plan.iter().step_by(2).all(|b| b.modality == Modality::Image));
        assert!(plan.iter().skip(1).step_by(2).all(|b| b.modality == Modality::Video && b.indices.len() == 2));
    }

    #[test]
    fn plan_is_seed_determined() {
        let s = schedule(Paradigm::Decoupled, 2, 2, 3, 2);
        assert_eq!(plan_batches(&s, 10, 6, 9).unwrap(), plan_batches(&s, 10, 6, 9).unwrap());
        assert_ne!(plan_batches(&s, 10, 6, 9).unwrap(), plan_batches(&s, 10, 6, 10).unwrap());
    }

    #[test]
    fn step_override_and_missing_video() {
        let mut s = schedule(Paradigm::Decoupled, 1, 1, 2, 2);
        s.stage1.steps = Some(5);
        s.stage2.steps = Some(3);
        let plan = plan_batches(&s, 4, 4, 0).unwrap();
        assert_eq!(plan.iter().filter(|b| b.stage == 0).count(), 5);
        assert_eq!(plan.iter().filter(|b| b.stage == 1).count(), 3);
        assert!(matches!(plan_batches(&s, 4, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn lr_curve() {
        let st = StageConfig {
            epochs: 1,
            steps: None,
            peak_lr: 3e-4,
            warmup_steps: 1000,
            decay_rate: 0.85,
        };
        assert_eq!(lr_at(0, 5000, &st), 0.0);
        assert!((lr_at(500, 5000, &st) - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(1000, 5000, &st) - 3e-4).abs() < 1e-18);
        assert!((lr_at(4999, 5000, &st) - 3e-4 * 0.85).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut p = ParamStore::new();
        p.insert("x.b", ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0));
        let mut g = BTreeMap::new();
        g.insert("x.b".to_string(), ndarray::arr1(&[2.0, -0.5, 0.0]).into_dyn());
        let mut opt = AdamW::new(0.05);
        opt.step(&mut p, &g, 0.1).unwrap();
        let v = p.get("x.b").unwrap();
        assert!((v[[0]] - 0.9).abs() < 1e-7 && (v[[1]] - 1.1).abs() < 1e-7 && v[[2]] == 1.0);
    }

    #[test]
    fn derive_seed_separates_paths() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }
}
