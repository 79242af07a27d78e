//! Named parameter registry with a frozen/trainable partition.

use std::collections::BTreeMap;
use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Parameters in registration order. Model structures hold [`ParamId`]s into
/// a store; the store owns the numbers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

/// Which leaves get `requires_grad` when parameters are placed on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Only parameters flagged trainable.
    Trainable,
    /// Every parameter (gradient checking).
    All,
    /// None (inference).
    None,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_elements(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, mode: GradMode) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    let rg = match mode {
                        GradMode::All => true,
                        GradMode::Trainable => p.trainable,
                        GradMode::None => false,
                    };
                    g.leaf(p.value.clone(), rg)
                })
                .collect(),
        )
    }

    /// SHA-256 of one parameter's shape and little-endian values.
    pub fn digest(&self, id: ParamId) -> String {
        tensor_digest(&self.params[id.0].value)
    }

    /// Digests of all frozen parameters, keyed by name.
    pub fn frozen_digests(&self) -> BTreeMap<String, String> {
        self.iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(id, p)| (p.name.clone(), self.digest(id)))
            .collect()
    }

    /// Digest over every parameter in registration order.
    pub fn digest_all(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update(tensor_digest(&p.value).as_bytes());
        }
        hex(&h.finalize())
    }
}

pub fn tensor_digest<T: Scalar>(t: &Tensor<T>) -> String {
    let mut h = Sha256::new();
    h.update(T::NAME.as_bytes());
    for &s in t.shape() {
        h.update((s as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.as_f64().to_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
