//! Named parameter storage shared by all network families.
//!
//! Every network owns a [`ParamStore`]; layers keep clones of the [`Var`]s
//! they register, so writing through the store (checkpoint load, snapshot
//! restore, optimizer step) is immediately visible to the forward pass.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradient updates.
    Trainable,
    /// Tracked state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub var: Var,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn insert(&mut self, name: String, var: Var, kind: ParamKind) {
        let prev = self.entries.insert(name.clone(), ParamEntry { var, kind });
        debug_assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Trainable parameters, in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(n, e)| (n, &e.var))
    }

    /// Deep copy of every tensor (parameters and buffers).
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(n, e)| Ok((n.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite values from `values`; every stored name must be present with
    /// a matching shape.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, entry) in &self.entries {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            self.set(name, entry, t)?;
        }
        Ok(())
    }

    pub(crate) fn set(&self, name: &str, entry: &ParamEntry, t: &Tensor) -> Result<()> {
        if t.dims() != entry.var.dims() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                entry.var.dims(),
                t.dims()
            )));
        }
        entry.var.set(&t.to_dtype(entry.var.dtype())?)?;
        Ok(())
    }

    pub fn set_named(&self, name: &str, t: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        self.set(name, entry, t)
    }
}

/// Seeded initializer handing out tensors in the network's dtype.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    fn make(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.make(data, shape)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                z * std
            })
            .collect();
        self.make(data, shape)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.make(vec![value; n], shape)
    }
}

/// Derive an independent sub-seed from a master seed and a component tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}
