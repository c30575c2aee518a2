//! Named parameter storage and the parameter-group taxonomy.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Top-level parameter groups, keyed by the name prefix before the first dot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// `ve.*`
    VisualEncoder,
    /// `te.*`
    TextEncoder,
    /// `ad.*`
    AlignmentDecoder,
    /// `gd.*`
    GenerationDecoder,
    /// `proj.*`
    Projection,
    /// `temp.*`
    Temperature,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::VisualEncoder,
        Group::TextEncoder,
        Group::AlignmentDecoder,
        Group::GenerationDecoder,
        Group::Projection,
        Group::Temperature,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::VisualEncoder => "ve",
            Group::TextEncoder => "te",
            Group::AlignmentDecoder => "ad",
            Group::GenerationDecoder => "gd",
            Group::Projection => "proj",
            Group::Temperature => "temp",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Parameters that only video inputs read: temporal attention sublayers and
/// the 3D tokenizer.
pub fn is_video_exclusive(name: &str) -> bool {
    name.contains(".temporal.") || name.starts_with("ve.tok3d.")
}

/// Ordered map from parameter name to value. Ordering is by name, so
/// iteration (and everything serialised from it) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.params.keys().any(|k| Group::of(k) == Some(group))
    }

    /// Copy of the parameters belonging to `groups`.
    pub fn subset(&self, groups: &[Group]) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| Group::of(k).is_some_and(|g| groups.contains(&g)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { params }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(ArrayD::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of `groups`
    /// (all groups when empty).
    pub fn digest(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        for (name, v) in &self.params {
            if !groups.is_empty() && !Group::of(name).is_some_and(|g| groups.contains(&g)) {
                continue;
            }
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        for (name, v) in &self.params {
            let o = other.get(name)?;
            if o.shape() != v.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    detail: format!("{:?} vs {:?}", v.shape(), o.shape()),
                });
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::MissingParam(extra.clone()));
        }
        Ok(())
    }
}

/// Parameter initialisers.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng));
        self.store.insert(name, v);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, ArrayD::ones(IxDyn(shape)));
    }

    /// `name.w [fan_in, fan_out]` and `name.b [fan_out]`; `zero` gives an
    /// all-zero layer.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) {
        if zero {
            self.zeros(&format!("{name}.w"), &[fan_in, fan_out]);
        } else {
            self.normal(&format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        }
        self.zeros(&format!("{name}.b"), &[fan_out]);
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.ones(&format!("{name}.g"), &[dim]);
        self.zeros(&format!("{name}.b"), &[dim]);
    }

    /// Query/key/value/output projections; `zero_out` zeroes the output
    /// projection so the sublayer starts as an identity residual.
    pub fn attention(&mut self, name: &str, dim: usize, zero_out: bool) {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.{p}"), dim, dim, false);
        }
        self.linear(&format!("{name}.o"), dim, dim, zero_out);
    }

    pub fn mlp(&mut self, name: &str, dim: usize, hidden: usize) {
        self.linear(&format!("{name}.fc1"), dim, hidden, false);
        self.linear(&format!("{name}.fc2"), hidden, dim, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn groups_resolve_by_prefix() {
        assert_eq!(Group::of("ve.blocks.0.spatial.attn.q.w"), Some(Group::VisualEncoder));
        assert_eq!(Group::of("temp.log_tau"), Some(Group::Temperature));
        assert_eq!(Group::of("zz.w"), None);
        assert!(is_video_exclusive("ve.blocks.1.temporal.attn.o.w"));
        assert!(is_video_exclusive("ve.tok3d.w"));
        assert!(!is_video_exclusive("ve.tok2d.w"));
    }

    #[test]
    fn digest_tracks_values_and_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, &mut rng);
        init.linear("ve.a", 2, 3, false);
        init.linear("te.a", 2, 3, false);
        let ve = store.digest(&[Group::VisualEncoder]);
        let all = store.digest(&[]);
        store.get_mut("te.a.w").unwrap()[[0, 0]] += 1.0;
        assert_eq!(ve, store.digest(&[Group::VisualEncoder]));
        assert_ne!(all, store.digest(&[]));
    }

    #[test]
    fn congruence_names_the_parameter() {
        let mut a = ParamStore::new();
        a.insert("ve.x", ArrayD::zeros(IxDyn(&[2])));
        let mut b = a.clone();
        b.insert("ve.x", ArrayD::zeros(IxDyn(&[3])));
        let err = a.check_congruent(&b).unwrap_err();
        assert!(err.to_string().contains("ve.x"));
    }
}
