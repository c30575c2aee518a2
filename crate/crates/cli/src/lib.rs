//! Batch-job commands behind the `uvl` binary: `synth`, `pretrain`, `eval`.
//!
//! Every command writes its artifacts to an output directory. Errors carry
//! an exit code: 2 for usage and configuration problems, 3 for failures at
//! run time.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use uvl_core::checkpoint::Checkpoint;
use uvl_core::corpus::{self, Corpus, ManifestOptions, Modality, SynthConfig};
use uvl_core::eval::{self, AblationConfig, ProbeConfig, QaConfig};
use uvl_core::params::Group;
use uvl_core::settings::RunSettings;
use uvl_core::text::Vocabulary;
use uvl_core::trainer::{Paradigm, Trainer};

#[derive(Debug, Parser)]
#[command(name = "uvl", version, about = "Unified image/video-language pretraining at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled corpus (manifest plus payload files).
    Synth(SynthArgs),
    /// Run two-stage pretraining.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint on a downstream task.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub outdir: PathBuf,
    /// `key=value` override; repeatable.
    #[arg(long = "override", value_name = "K=V")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub outdir: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub video_fraction: f64,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Continue from a checkpoint written under the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Retrieval,
    Zeroshot,
    Probe,
    Caption,
    Qa,
    Ablate,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Required for every task except `ablate`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Re-ranking shortlist size.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Beam width; 0 selects greedy decoding.
    #[arg(long)]
    pub beam: Option<usize>,
}

/// Marks an error as a usage/configuration problem (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Exit code for an error returned by one of the commands.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use uvl_core::Error as E;
    let is_usage = err.chain().any(|e| {
        e.is::<Usage>() || matches!(e.downcast_ref::<E>(), Some(E::Config(_) | E::Parse { .. } | E::Schema { .. }))
    });
    if is_usage {
        2
    } else {
        3
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Pretrain(a) => cmd_pretrain(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
    }
}

fn prepare_outdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| usage(format!("output directory {} is not writable: {e}", dir.display())))?;
    fs::remove_file(&probe).ok();
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    prepare_outdir(&args.outdir)?;
    let cfg = SynthConfig {
        seed: args.seed,
        n_classes: args.classes,
        n_per_class: args.per_class,
        image_size: args.image_size,
        channels: 3,
        frames: args.frames,
        video_fraction: args.video_fraction,
    };
    let corpus = corpus::synth_corpus(&cfg).map_err(|e| usage(e.to_string()))?;
    let manifest = corpus.write(&args.outdir)?;
    println!("wrote {} triplets to {}", corpus.len(), manifest.display());
    Ok(manifest)
}

/// Settings from the config file, then overrides, then `--seed`.
pub fn resolve_settings(common: &CommonArgs) -> Result<RunSettings> {
    let mut s = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            RunSettings::parse(&text)?
        }
        None => RunSettings::default(),
    };
    for o in &common.overrides {
        s.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        s.train.seed = seed;
    }
    Ok(s)
}

fn load_corpus(path: &Path, s: &RunSettings) -> Result<Corpus> {
    if !path.exists() {
        return Err(usage(format!("corpus manifest {} does not exist", path.display())));
    }
    let opts = ManifestOptions {
        group_identical_captions: s.data.group_identical_captions,
        ..Default::default()
    };
    Ok(corpus::load_manifest(path, &opts)?)
}

fn synth_from(s: &RunSettings, seed: u64) -> Result<Corpus> {
    let cfg = SynthConfig {
        seed,
        image_size: s.train.model.image_size,
        channels: s.train.model.channels,
        ..s.data.synth.clone()
    };
    corpus::synth_corpus(&cfg).map_err(|e| usage(format!("synth settings: {e}")))
}

/// Training corpus: the manifest when configured, else the synthetic one.
pub fn train_corpus(s: &RunSettings) -> Result<Corpus> {
    match &s.data.manifest {
        Some(p) => load_corpus(p, s),
        None => synth_from(s, s.data.synth.seed),
    }
}

/// Held-out corpus: the eval manifest, else a synthetic draw with a
/// different seed.
pub fn eval_corpus(s: &RunSettings) -> Result<Corpus> {
    match &s.data.eval_manifest {
        Some(p) => load_corpus(p, s),
        None => synth_from(s, s.data.synth.seed.wrapping_add(1_000_003)),
    }
}

fn joint_vocabulary(train: &Corpus, held: &Corpus) -> Vocabulary {
    let mut all = train.clone();
    all.triplets.extend(held.triplets.iter().cloned());
    all.vocabulary()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub steps: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PretrainSummary> {
    let mut s = resolve_settings(&args.common)?;
    let out = &args.common.outdir;
    let train = train_corpus(&s)?;
    let held = eval_corpus(&s)?;
    let vocab = joint_vocabulary(&train, &held);
    s.train.model.vocab_size = vocab.len();
    s.train.validate()?;
    prepare_outdir(out)?;

    fs::write(out.join("config.resolved"), s.to_text()).context("writing resolved config")?;
    vocab.save(&out.join("vocab.txt"))?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            ck.check_config(&s.train)?;
            Trainer::resume(s.train.clone(), &train, &vocab, ck.to_state()?)?
        }
        None => Trainer::new(s.train.clone(), &train, &vocab)?,
    };
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let total = trainer.total_steps();
    let cfg = s.train.clone();
    let (log_every, ck_every) = (s.log_every.max(1), s.checkpoint_every);
    trainer.run(|m, state| {
        let done = m.step + 1;
        if done % log_every == 0 || done == total {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(metrics, "{line}").map_err(|e| uvl_core::Error::Argument(format!("writing metrics: {e}")))?;
        }
        if ck_every > 0 && done % ck_every == 0 && done < total {
            Checkpoint::from_state(state, &cfg, &vocab).save(&out.join(format!("checkpoint_{done:06}.ckpt")))?;
        }
        Ok(())
    })?;
    let state = trainer.into_state();
    let checkpoint = out.join("final.ckpt");
    Checkpoint::from_state(&state, &s.train, &vocab).save(&checkpoint)?;
    println!("trained {} steps; checkpoint {}", state.step, checkpoint.display());
    Ok(PretrainSummary {
        steps: state.step,
        checkpoint,
        metrics: metrics_path,
    })
}

fn require_visual(params: &uvl_core::params::ParamStore, task: Task) -> Result<()> {
    if !params.has_group(Group::VisualEncoder) {
        bail!("task {task:?} needs a visual encoder but the checkpoint has none");
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<serde_json::Value> {
    let mut s = resolve_settings(&args.common)?;
    if let Some(k) = args.k {
        s.eval.k = k;
    }
    if let Some(m) = args.max_len {
        s.eval.max_len = m;
    }
    if let Some(b) = args.beam {
        s.eval.beam = b;
    }
    let out = &args.common.outdir;
    prepare_outdir(out)?;

    if args.task == Task::Ablate {
        let report = run_ablation(&s, out)?;
        write_report(out, args.task, &report)?;
        return Ok(report);
    }

    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage(format!("--checkpoint is required for task {:?}", args.task)))?;
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let params = ck.params();
    let vocab = ck.vocabulary()?;
    let model = ck.meta.config.model.clone();
    s.train.model = model.clone();
    let held = eval_corpus(&s)?;
    let gen = s.eval.generation();

    let mut report = serde_json::Map::new();
    match args.task {
        Task::Retrieval => {
            require_visual(&params, args.task)?;
            for m in [Modality::Image, Modality::Video] {
                let part = held.filter(m);
                if part.is_empty() {
                    continue;
                }
                let r = eval::retrieve_corpus(&params, &model, &vocab, &part, s.eval.k)?;
                report.insert(
                    m.to_string(),
                    json!({"k": s.eval.k, "t2v": r.t2v.recall, "v2t": r.v2t.recall, "mean_r1": r.mean_r1()}),
                );
            }
        }
        Task::Zeroshot => {
            require_visual(&params, args.task)?;
            for m in [Modality::Image, Modality::Video] {
                let part = held.filter(m);
                if part.is_empty() {
                    continue;
                }
                let visuals: Vec<_> = part.triplets.iter().map(|t| &t.visual).collect();
                let mut prompts: Vec<String> = Vec::new();
                let mut prompt_labels = Vec::new();
                for t in &part.triplets {
                    if !prompts.contains(&t.text) {
                        prompts.push(t.text.clone());
                        prompt_labels.push(t.label);
                    }
                }
                let v = eval::encode_visuals(&params, &model, &visuals)?.embed;
                let w = eval::encode_texts(&params, &model, &vocab, &prompts)?;
                let order = eval::cosine_order(&v, &w);
                let labels: Vec<_> = part.triplets.iter().map(|t| t.label).collect();
                let acc = eval::recall_at(&order, &labels, &prompt_labels, 1);
                let r = eval::retrieve_corpus(&params, &model, &vocab, &part, s.eval.k)?;
                report.insert(
                    m.to_string(),
                    json!({
                        "k": s.eval.k,
                        "t2v": r.t2v.recall,
                        "v2t": r.v2t.recall,
                        "mean_r1": r.mean_r1(),
                        "prompt_accuracy": acc,
                        "classes": prompts.len(),
                    }),
                );
            }
        }
        Task::Probe => {
            require_visual(&params, args.task)?;
            let train = train_corpus(&s)?;
            let digest_before = params.digest(&[Group::VisualEncoder]);
            for m in [Modality::Image, Modality::Video] {
                let (tr, te) = (train.filter(m), held.filter(m));
                if tr.is_empty() || te.is_empty() {
                    continue;
                }
                let names: Vec<String> = tr
                    .triplets
                    .iter()
                    .chain(&te.triplets)
                    .map(|t| t.class_name.clone().ok_or_else(|| usage("linear probing needs class-labelled records")))
                    .collect::<Result<_>>()?;
                let (idx, _) = eval::class_indices(&names);
                let (ytr, yte) = idx.split_at(tr.len());
                let xtr = eval::extract_features(&params, &model, &tr.triplets.iter().map(|t| &t.visual).collect::<Vec<_>>())?;
                let xte = eval::extract_features(&params, &model, &te.triplets.iter().map(|t| &t.visual).collect::<Vec<_>>())?;
                let probe = ProbeConfig {
                    steps: s.eval.probe_steps,
                    ..Default::default()
                };
                let r = eval::linear_probe(&xtr, ytr, &xte, yte, &probe)?;
                report.insert(m.to_string(), serde_json::to_value(r)?);
            }
            let frozen = params.digest(&[Group::VisualEncoder]) == digest_before;
            report.insert("encoder_frozen".into(), json!(frozen));
        }
        Task::Caption => {
            require_visual(&params, args.task)?;
            for m in [Modality::Image, Modality::Video] {
                let part = held.filter(m);
                if part.is_empty() {
                    continue;
                }
                let (bleu, outputs) = eval::caption_corpus(&params, &model, &vocab, &part, &gen)?;
                let samples: Vec<_> = part
                    .triplets
                    .iter()
                    .zip(&outputs)
                    .take(8)
                    .map(|(t, o)| json!({"reference": t.text, "generated": o}))
                    .collect();
                report.insert(m.to_string(), json!({"bleu4": bleu, "samples": samples}));
            }
        }
        Task::Qa => {
            require_visual(&params, args.task)?;
            let train = train_corpus(&s)?;
            let qa = QaConfig {
                steps: s.eval.qa_steps,
                lr: s.eval.qa_lr,
                batch: s.eval.qa_batch,
                seed: s.train.seed,
            };
            let tuned = eval::finetune_qa(&params, &model, &vocab, &train, &train.qa_pairs(), &qa)?;
            for m in [Modality::Image, Modality::Video] {
                let part = held.filter(m);
                let pairs = part.qa_pairs();
                if pairs.is_empty() {
                    continue;
                }
                let acc = eval::qa_accuracy(&tuned, &model, &vocab, &part, &pairs, &gen)?;
                report.insert(m.to_string(), json!({"accuracy": acc, "questions": pairs.len()}));
            }
        }
        Task::Ablate => unreachable!("handled above"),
    }
    if report.is_empty() {
        return Err(usage("evaluation corpus has nothing usable for this task"));
    }
    let report = serde_json::Value::Object(report);
    write_report(out, args.task, &report)?;
    Ok(report)
}

fn run_ablation(s: &RunSettings, out: &Path) -> Result<serde_json::Value> {
    let train = train_corpus(s)?;
    let held = eval_corpus(s)?;
    let vocab = joint_vocabulary(&train, &held);
    let mut cfg = s.train.clone();
    cfg.model.vocab_size = vocab.len();
    cfg.validate()?;
    let ab = AblationConfig {
        train: cfg,
        paradigms: Paradigm::ALL.to_vec(),
        seeds: vec![s.train.seed],
        k: s.eval.k,
        gen_max_len: s.eval.max_len,
        qa: (s.eval.qa_steps > 0).then_some(QaConfig {
            steps: s.eval.qa_steps,
            lr: s.eval.qa_lr,
            batch: s.eval.qa_batch,
            seed: s.train.seed,
        }),
        caption: true,
    };
    let table = eval::ablate_paradigms(&ab, &vocab, &train, &held)?;
    fs::write(out.join("ablation.md"), table.to_text())?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    print!("{}", table.to_text());
    Ok(serde_json::to_value(&table)?)
}

fn write_report(out: &Path, task: Task, report: &serde_json::Value) -> Result<()> {
    let name = format!("eval_{}.json", format!("{task:?}").to_lowercase());
    let path = out.join(name);
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| anyhow!("writing {}: {e}", path.display()))?;
    println!("{}", serde_json::to_string(report)?);
    Ok(())
}
