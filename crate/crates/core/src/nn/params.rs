use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        if let Some(&slot) = self.index.get(&name) {
            self.tensors[slot] = tensor;
            return slot;
        }
        let slot = self.names.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.tensors.push(tensor);
        slot
    }

    /// Glorot-uniform init: U(−s, s), s = √(6 / (fan_in + fan_out)).
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> usize {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-s..s))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|s| &self.tensors[s])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slot(name).map(|s| &mut self.tensors[s])
    }

    pub fn by_slot(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub(crate) fn by_slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::from(self);
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::json("checkpoint", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        ckpt.into_store()
    }
}

pub const CHECKPOINT_FORMAT: &str = "accent-asr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter checkpoint: `{"format", "version", "params": {name: {"shape", "data"}}}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: BTreeMap<String, CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&ParamStore> for Checkpoint {
    fn from(store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    CheckpointEntry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params,
        }
    }
}

impl Checkpoint {
    pub fn into_store(self) -> Result<ParamStore> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::config(
                "checkpoint",
                format!(
                    "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                    self.format, self.version
                ),
            ));
        }
        let mut store = ParamStore::new();
        for (name, entry) in self.params {
            let t = Tensor::new(entry.shape, entry.data)
                .map_err(|e| Error::config(format!("params.{name}"), e.to_string()))?;
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Gradients aligned with the slots of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub(crate) fn new(len: usize) -> Self {
        Grads {
            grads: vec![None; len],
        }
    }

    pub(crate) fn set(&mut self, slot: usize, g: Tensor) {
        self.grads[slot] = Some(g);
    }

    /// Gradient for a slot; `None` when the parameter did not take part in the loss.
    pub fn slot(&self, slot: usize) -> Option<&Tensor> {
        self.grads.get(slot).and_then(Option::as_ref)
    }

    pub fn get(&self, store: &ParamStore, name: &str) -> Option<&Tensor> {
        store.slot(name).and_then(|s| self.slot(s))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Largest absolute gradient entry over the parameters matching `pred`.
    pub fn max_abs_where(&self, store: &ParamStore, pred: impl Fn(&str) -> bool) -> f64 {
        self.grads
            .iter()
            .enumerate()
            .filter(|(s, _)| pred(store.name(*s)))
            .filter_map(|(_, g)| g.as_ref())
            .flat_map(|g| g.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
