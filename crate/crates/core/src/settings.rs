//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! schedule.paradigm = decoupled
//! schedule.stage1.steps = 200
//! model.dim = 64
//! ```
//!
//! Keys are dotted paths; unknown keys are rejected. Overrides use the same
//! `key=value` form.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::generate::{GenerationConfig, Strategy};
use crate::trainer::{Paradigm, ScheduleConfig, StageConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    /// Training manifest; a synthetic corpus is generated when absent.
    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub group_identical_captions: bool,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub max_len: usize,
    /// Beam width; 0 selects greedy decoding.
    pub beam: usize,
    pub prefix: String,
    pub qa_steps: usize,
    pub qa_lr: f64,
    pub qa_batch: usize,
    pub probe_steps: usize,
}

impl EvalSettings {
    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_len: self.max_len,
            strategy: if self.beam == 0 { Strategy::Greedy } else { Strategy::Beam(self.beam) },
            prefix: self.prefix.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// `model.vocab_size` is filled in from the corpus vocabulary.
    pub train: TrainConfig,
    pub data: DataSettings,
    pub eval: EvalSettings,
    pub log_every: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        let mut train = TrainConfig::new(ModelConfig::desk(0), ScheduleConfig::desk(Paradigm::Decoupled));
        train.bank_size = 256;
        Self {
            train,
            data: DataSettings {
                manifest: None,
                eval_manifest: None,
                group_identical_captions: false,
                synth: SynthConfig {
                    video_fraction: 0.5,
                    ..SynthConfig::default()
                },
            },
            eval: EvalSettings {
                k: 128,
                max_len: 16,
                beam: 0,
                prefix: String::new(),
                qa_steps: 60,
                qa_lr: 1e-4,
                qa_batch: 8,
                probe_steps: 1000,
            },
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn stage_set(st: &mut StageConfig, key: &str, field: &str, value: &str) -> Result<bool> {
    match field {
        "epochs" => st.epochs = parse(key, value)?,
        "steps" => st.steps = parse_opt(key, value)?,
        "peak_lr" => st.peak_lr = parse(key, value)?,
        "warmup_steps" => st.warmup_steps = parse(key, value)?,
        "decay_rate" => st.decay_rate = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunSettings {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "model.dim" => parse(key, value).map(|v| t.model.dim = v)?,
            "model.heads" => parse(key, value).map(|v| t.model.heads = v)?,
            "model.visual_depth" => parse(key, value).map(|v| t.model.visual_depth = v)?,
            "model.text_depth" => parse(key, value).map(|v| t.model.text_depth = v)?,
            "model.decoder_depth" => parse(key, value).map(|v| t.model.decoder_depth = v)?,
            "model.mlp_ratio" => parse(key, value).map(|v| t.model.mlp_ratio = v)?,
            "model.image_size" => parse(key, value).map(|v| t.model.image_size = v)?,
            "model.channels" => parse(key, value).map(|v| t.model.channels = v)?,
            "model.patch_size" => parse(key, value).map(|v| t.model.patch_size = v)?,
            "model.tubelet" => parse(key, value).map(|v| t.model.tubelet = v)?,
            "model.max_frames" => parse(key, value).map(|v| t.model.max_frames = v)?,
            "model.temporal_attention" => parse(key, value).map(|v| t.model.temporal_attention = v)?,
            "model.max_text_len" => parse(key, value).map(|v| t.model.max_text_len = v)?,
            "model.proj_dim" => parse(key, value).map(|v| t.model.proj_dim = v)?,
            "model.init_temperature" => parse(key, value).map(|v| t.model.init_temperature = v)?,
            "schedule.paradigm" => t.schedule.paradigm = Paradigm::parse(value)?,
            "schedule.batch_image" => parse(key, value).map(|v| t.schedule.batch_image = v)?,
            "schedule.batch_video" => parse(key, value).map(|v| t.schedule.batch_video = v)?,
            "train.seed" => parse(key, value).map(|v| t.seed = v)?,
            "train.momentum" => parse(key, value).map(|v| t.momentum = v)?,
            "train.bank_size" => parse(key, value).map(|v| t.bank_size = v)?,
            "train.weight_decay" => parse(key, value).map(|v| t.weight_decay = v)?,
            "train.normalize_positives" => parse(key, value).map(|v| t.normalize_positives = v)?,
            "train.log_every" => parse(key, value).map(|v| self.log_every = v)?,
            "train.checkpoint_every" => parse(key, value).map(|v| self.checkpoint_every = v)?,
            "loss.univlc" => parse(key, value).map(|v| t.weights.univlc = v)?,
            "loss.vlm" => parse(key, value).map(|v| t.weights.vlm = v)?,
            "loss.lm" => parse(key, value).map(|v| t.weights.lm = v)?,
            "data.manifest" => self.data.manifest = (value != "none").then(|| PathBuf::from(value)),
            "data.eval_manifest" => self.data.eval_manifest = (value != "none").then(|| PathBuf::from(value)),
            "data.group_identical_captions" => parse(key, value).map(|v| self.data.group_identical_captions = v)?,
            "synth.classes" => parse(key, value).map(|v| self.data.synth.n_classes = v)?,
            "synth.per_class" => parse(key, value).map(|v| self.data.synth.n_per_class = v)?,
            "synth.video_fraction" => parse(key, value).map(|v| self.data.synth.video_fraction = v)?,
            "synth.frames" => parse(key, value).map(|v| self.data.synth.frames = v)?,
            "synth.seed" => parse(key, value).map(|v| self.data.synth.seed = v)?,
            "eval.k" => parse(key, value).map(|v| self.eval.k = v)?,
            "eval.max_len" => parse(key, value).map(|v| self.eval.max_len = v)?,
            "eval.beam" => parse(key, value).map(|v| self.eval.beam = v)?,
            "eval.prefix" => self.eval.prefix = value.to_string(),
            "eval.qa_steps" => parse(key, value).map(|v| self.eval.qa_steps = v)?,
            "eval.qa_lr" => parse(key, value).map(|v| self.eval.qa_lr = v)?,
            "eval.qa_batch" => parse(key, value).map(|v| self.eval.qa_batch = v)?,
            "eval.probe_steps" => parse(key, value).map(|v| self.eval.probe_steps = v)?,
            _ => {
                let stage = key
                    .strip_prefix("schedule.stage1.")
                    .map(|f| (0, f))
                    .or_else(|| key.strip_prefix("schedule.stage2.").map(|f| (1, f)));
                let ok = match stage {
                    Some((0, f)) => stage_set(&mut t.schedule.stage1, key, f, value)?,
                    Some((_, f)) => stage_set(&mut t.schedule.stage2, key, f, value)?,
                    None => false,
                };
                if !ok {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
        self.set(k.trim(), v)
    }

    /// Parses a configuration file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            s.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(s)
    }

    /// Every key with its current value, in a form `parse` accepts.
    pub fn to_text(&self) -> String {
        let m = &self.train.model;
        let t = &self.train;
        let mut kv: Vec<(String, String)> = vec![
            ("model.dim".into(), m.dim.to_string()),
            ("model.heads".into(), m.heads.to_string()),
            ("model.visual_depth".into(), m.visual_depth.to_string()),
            ("model.text_depth".into(), m.text_depth.to_string()),
            ("model.decoder_depth".into(), m.decoder_depth.to_string()),
            ("model.mlp_ratio".into(), m.mlp_ratio.to_string()),
            ("model.image_size".into(), m.image_size.to_string()),
            ("model.channels".into(), m.channels.to_string()),
            ("model.patch_size".into(), m.patch_size.to_string()),
            ("model.tubelet".into(), m.tubelet.to_string()),
            ("model.max_frames".into(), m.max_frames.to_string()),
            ("model.temporal_attention".into(), m.temporal_attention.to_string()),
            ("model.max_text_len".into(), m.max_text_len.to_string()),
            ("model.proj_dim".into(), m.proj_dim.to_string()),
            ("model.init_temperature".into(), m.init_temperature.to_string()),
            ("schedule.paradigm".into(), t.schedule.paradigm.to_string()),
            ("schedule.batch_image".into(), t.schedule.batch_image.to_string()),
            ("schedule.batch_video".into(), t.schedule.batch_video.to_string()),
        ];
        for (i, st) in [&t.schedule.stage1, &t.schedule.stage2].into_iter().enumerate() {
            let p = format!("schedule.stage{}", i + 1);
            kv.push((format!("{p}.epochs"), st.epochs.to_string()));
            kv.push((format!("{p}.steps"), opt_str(&st.steps)));
            kv.push((format!("{p}.peak_lr"), st.peak_lr.to_string()));
            kv.push((format!("{p}.warmup_steps"), st.warmup_steps.to_string()));
            kv.push((format!("{p}.decay_rate"), st.decay_rate.to_string()));
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
        kv.extend([
            ("train.seed".into(), t.seed.to_string()),
            ("train.momentum".into(), t.momentum.to_string()),
            ("train.bank_size".into(), t.bank_size.to_string()),
            ("train.weight_decay".into(), t.weight_decay.to_string()),
            ("train.normalize_positives".into(), t.normalize_positives.to_string()),
            ("train.log_every".into(), self.log_every.to_string()),
            ("train.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("loss.univlc".into(), t.weights.univlc.to_string()),
            ("loss.vlm".into(), t.weights.vlm.to_string()),
            ("loss.lm".into(), t.weights.lm.to_string()),
            ("data.manifest".into(), path(&self.data.manifest)),
            ("data.eval_manifest".into(), path(&self.data.eval_manifest)),
            ("data.group_identical_captions".into(), self.data.group_identical_captions.to_string()),
            ("synth.classes".into(), self.data.synth.n_classes.to_string()),
            ("synth.per_class".into(), self.data.synth.n_per_class.to_string()),
            ("synth.video_fraction".into(), self.data.synth.video_fraction.to_string()),
            ("synth.frames".into(), self.data.synth.frames.to_string()),
            ("synth.seed".into(), self.data.synth.seed.to_string()),
            ("eval.k".into(), self.eval.k.to_string()),
            ("eval.max_len".into(), self.eval.max_len.to_string()),
            ("eval.beam".into(), self.eval.beam.to_string()),
            ("eval.prefix".into(), self.eval.prefix.clone()),
            ("eval.qa_steps".into(), self.eval.qa_steps.to_string()),
            ("eval.qa_lr".into(), self.eval.qa_lr.to_string()),
            ("eval.qa_batch".into(), self.eval.qa_batch.to_string()),
            ("eval.probe_steps".into(), self.eval.probe_steps.to_string()),
        ]);
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut s = RunSettings::default();
        s.set("schedule.stage2.steps", "17").unwrap();
        s.set("model.temporal_attention", "false").unwrap();
        s.set("data.manifest", "/tmp/m.jsonl").unwrap();
        let back = RunSettings::parse(&s.to_text()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let err = RunSettings::parse("model.dim = 8\nmodel.dims = 4\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("model.dims"), "{err}");
        assert!(RunSettings::parse("model.dim 8").is_err());
        assert!(RunSettings::default().apply_override("model.dim=eight").is_err());
        assert!(RunSettings::default().apply_override("schedule.paradigm=sideways").is_err());
    }

    #[test]
    fn overrides_and_comments() {
        let mut s = RunSettings::parse("# header\nschedule.paradigm = image_only  # trailing\n").unwrap();
        assert_eq!(s.train.schedule.paradigm, Paradigm::ImageOnly);
        s.apply_override("schedule.stage1.steps=none").unwrap();
        assert_eq!(s.train.schedule.stage1.steps, None);
        s.apply_override("train.seed=9").unwrap();
        assert_eq!(s.train.seed, 9);
    }
}
