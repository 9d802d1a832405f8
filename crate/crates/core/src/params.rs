//! Named parameter storage partitioned into freezable groups.
//!
//! Every trainable tensor lives here under `group/name`. Optimizers update
//! only unfrozen groups; a frozen group must come out of any number of
//! training steps bit-identical, which the group hash makes checkable.

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};
use indexmap::IndexMap;
use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Stable handle to one parameter tensor.
pub type ParamId = usize;

struct ParamEntry<E> {
    group: String,
    name: String,
    value: Tensor<E>,
}

struct GroupInfo {
    frozen: bool,
    params: Vec<ParamId>,
}

pub struct ParamStore<E: Scalar> {
    entries: Vec<ParamEntry<E>>,
    groups: IndexMap<String, GroupInfo>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            groups: IndexMap::new(),
        }
    }

    /// Register a parameter, creating its group on first use.
    pub fn add(&mut self, group: &str, name: &str, value: Tensor<E>) -> Result<ParamId> {
        if self.id_of(group, name).is_some() {
            return Err(Error::Config(format!("duplicate parameter {group}/{name}")));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            group: group.to_string(),
            name: name.to_string(),
            value,
        });
        self.groups
            .entry(group.to_string())
            .or_insert(GroupInfo {
                frozen: false,
                params: Vec::new(),
            })
            .params
            .push(id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let old = &self.entries[id].value;
        if old.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!(
                    "{}/{}: stored {:?} vs new {:?}",
                    self.entries[id].group,
                    self.entries[id].name,
                    old.shape(),
                    value.shape()
                ),
            ));
        }
        self.entries[id].value = value;
        Ok(())
    }

    pub fn id_of(&self, group: &str, name: &str) -> Option<ParamId> {
        self.groups.get(group)?.params.iter().copied().find(|&id| {
            self.entries[id].name == name
        })
    }

    pub fn meta(&self, id: ParamId) -> (&str, &str) {
        (&self.entries[id].group, &self.entries[id].name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(|s| s.as_str())
    }

    pub fn group_params(&self, group: &str) -> &[ParamId] {
        self.groups
            .get(group)
            .map(|g| g.params.as_slice())
            .unwrap_or(&[])
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        match self.groups.get_mut(group) {
            Some(g) => {
                g.frozen = frozen;
                Ok(())
            }
            None => Err(Error::Config(format!("unknown parameter group {group}"))),
        }
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.groups.get(group).map(|g| g.frozen).unwrap_or(false)
    }

    pub fn is_frozen_param(&self, id: ParamId) -> bool {
        self.is_frozen(&self.entries[id].group)
    }

    /// Freeze exactly the listed groups, unfreezing all others.
    pub fn freeze_all_except(&mut self, trainable: &[&str]) {
        for (name, info) in self.groups.iter_mut() {
            info.frozen = !trainable.iter().any(|t| t == name);
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// SHA-256 over the bit patterns of every value in the group, in
    /// registration order. Two hashes are equal iff the group is bit-identical.
    pub fn group_hash(&self, group: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for &id in self.group_params(group) {
            h.update(self.entries[id].name.as_bytes());
            for v in self.entries[id].value.data() {
                h.update(v.to_bit_pattern().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Cast every value to another scalar type, preserving ids, names, order
    /// and freeze flags.
    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(&e.group, &e.name, e.value.cast::<F>()).unwrap();
        }
        for (name, info) in &self.groups {
            out.set_frozen(name, info.frozen).unwrap();
        }
        out
    }
}

/// Truncated normal init: resample anything beyond two standard deviations.
pub fn trunc_normal<E: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<E> {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(lit::<E>(z * std));
        }
    }
    Tensor::matrix(rows, cols, data).expect("init shape")
}

pub fn zeros<E: Scalar>(rows: usize, cols: usize) -> Tensor<E> {
    Tensor::zeros(vec![rows, cols])
}

pub fn ones<E: Scalar>(rows: usize, cols: usize) -> Tensor<E> {
    Tensor::full(vec![rows, cols], E::one())
}
