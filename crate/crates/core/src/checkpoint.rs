//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `UVLCKPT1`, `u64` metadata length, UTF-8
//! JSON metadata, `u64` array count, then per array: `u32` name length,
//! name, `u32` rank, `u64` per axis, `f64` values in row-major order.
//! Arrays are written in name order, so saving a loaded checkpoint
//! reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::MemoryBank;
use crate::params::ParamStore;
use crate::text::Vocabulary;
use crate::trainer::{AdamSlot, AdamW, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"UVLCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub adam_steps: BTreeMap<String, u64>,
    pub bank_cursor: usize,
    pub bank_filled: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

const PARAM: &str = "param/";
const MOMENTUM: &str = "momentum/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig, vocab: &Vocabulary) -> Self {
        let mut arrays = BTreeMap::new();
        for (n, v) in state.params.iter() {
            arrays.insert(format!("{PARAM}{n}"), v.clone());
        }
        for (n, v) in state.momentum.iter() {
            arrays.insert(format!("{MOMENTUM}{n}"), v.clone());
        }
        let mut adam_steps = BTreeMap::new();
        for (n, slot) in &state.optimizer.slots {
            arrays.insert(format!("{ADAM_M}{n}"), slot.m.clone());
            arrays.insert(format!("{ADAM_V}{n}"), slot.v.clone());
            adam_steps.insert(n.clone(), slot.t);
        }
        arrays.insert("bank/visual".into(), state.bank.raw_visual().clone().into_dyn());
        arrays.insert("bank/text".into(), state.bank.raw_text().clone().into_dyn());
        let labels: Vec<f64> = state.bank.raw_labels().iter().map(|&l| l as f64).collect();
        arrays.insert("bank/labels".into(), ArrayD::from_shape_vec(IxDyn(&[labels.len()]), labels).expect("1-d"));
        Self {
            meta: CheckpointMeta {
                step: state.step,
                config_hash: cfg.hash(),
                config: cfg.clone(),
                vocab: vocab.tokens().to_vec(),
                adam_steps,
                bank_cursor: state.bank.cursor(),
                bank_filled: state.bank.filled(),
            },
            arrays,
        }
    }

    fn with_prefix(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (n, v) in self.arrays.range(prefix.to_string()..) {
            match n.strip_prefix(prefix) {
                Some(rest) => store.insert(rest, v.clone()),
                None => break,
            }
        }
        store
    }

    /// Live model parameters.
    pub fn params(&self) -> ParamStore {
        self.with_prefix(PARAM)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.meta.vocab.clone())
    }

    pub fn to_state(&self) -> Result<TrainState> {
        let params = self.params();
        let momentum = self.with_prefix(MOMENTUM);
        let m = self.with_prefix(ADAM_M);
        let v = self.with_prefix(ADAM_V);
        let mut optimizer = AdamW::new(self.meta.config.weight_decay);
        for (name, &t) in &self.meta.adam_steps {
            let slot = AdamSlot {
                m: m.get(name).map_err(|_| Error::Checkpoint(format!("missing first moment of `{name}`")))?.clone(),
                v: v.get(name).map_err(|_| Error::Checkpoint(format!("missing second moment of `{name}`")))?.clone(),
                t,
            };
            optimizer.slots.insert(name.clone(), slot);
        }
        let get2 = |key: &str| -> Result<Array2<f64>> {
            self.arrays
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Checkpoint(format!("`{key}`: {e}")))
        };
        let labels = self
            .arrays
            .get("bank/labels")
            .ok_or_else(|| Error::Checkpoint("missing `bank/labels`".into()))?
            .iter()
            .map(|&x| x as u64)
            .collect();
        let bank = MemoryBank::from_parts(
            get2("bank/visual")?,
            get2("bank/text")?,
            labels,
            self.meta.bank_cursor,
            self.meta.bank_filled,
        )?;
        Ok(TrainState {
            params,
            momentum,
            bank,
            optimizer,
            step: self.meta.step,
        })
    }

    /// Fails unless the checkpoint was written under `cfg`.
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        if self.meta.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "configuration hash {} does not match the checkpoint's {}",
                cfg.hash(),
                self.meta.config_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(meta.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u64()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).expect("sized"));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
