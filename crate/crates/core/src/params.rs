//! Named parameter storage shared by the backbone and the fusion encoder.
//!
//! A `ParamStore` owns the master copy of every weight and buffer. Each
//! training step binds the needed entries onto a fresh tape, runs
//! forward/backward, and reads the gradients back out keyed by name.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    /// Buffers (running statistics, feature normalizers) are not trainable.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, data: Vec<T>, shape: Vec<usize>, trainable: bool) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: data does not match shape"
        );
        assert!(
            !self.index.contains_key(name),
            "param {name} inserted twice"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            data,
            shape,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        &self.entries[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))]
    }

    pub fn try_get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"));
        &mut self.entries[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Entries in insertion order, which is the canonical (deterministic)
    /// order for checkpoints and optimizer sweeps.
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Move a buffer's data out (for in-place ops); pair with [`put_data`].
    pub fn take_data(&mut self, name: &str) -> Vec<T> {
        std::mem::take(&mut self.get_mut(name).data)
    }

    pub fn put_data(&mut self, name: &str, data: Vec<T>) {
        let p = self.get_mut(name);
        assert_eq!(data.len(), p.shape.iter().product::<usize>());
        p.data = data;
    }

    /// Bind an entry onto the tape as a leaf. `trainable_grads` controls
    /// whether trainable entries get gradients (false = frozen forward).
    /// Bindings are tracked by name so `Tape::bound_grads` can return them.
    pub fn bind(&self, tape: &mut Tape<T>, name: &str, trainable_grads: bool) -> TensorId {
        let p = self.get(name);
        tape.bind_param(name, p.data.clone(), &p.shape, p.trainable && trainable_grads)
            .expect("stored param is consistent")
    }

    /// FNV-1a fingerprint over the exact bit patterns of every entry, in
    /// order. Used to verify that frozen parameters do not move.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.entries {
            eat(p.name.as_bytes());
            for &v in &p.data {
                eat(&v.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Apply gradient updates through a caller-supplied closure (used by the
    /// optimizer). The closure sees (name, data, grad).
    pub fn apply_grads<F>(&mut self, grads: &HashMap<String, Vec<T>>, mut f: F) -> Result<()>
    where
        F: FnMut(&str, &mut [T], &[T]),
    {
        for p in &mut self.entries {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(&p.name) {
                if g.len() != p.data.len() {
                    return Err(Error::invalid(
                        "apply_grads",
                        format!("grad for {} has {} elems, param has {}", p.name, g.len(), p.data.len()),
                    ));
                }
                f(&p.name, &mut p.data, g);
            }
        }
        Ok(())
    }
}

/// Weight initialization used across the model: zero-mean normals scaled by
/// fan-in for conv/linear weights, zeros for biases, 0.02-std normals for
/// embeddings.
pub struct Init;

impl Init {
    pub fn kaiming<T: Scalar, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect()
    }

    pub fn embedding<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * 0.02)
            })
            .collect()
    }

    pub fn zeros<T: Scalar>(n: usize) -> Vec<T> {
        vec![T::zero(); n]
    }

    pub fn ones<T: Scalar>(n: usize) -> Vec<T> {
        vec![T::one(); n]
    }
}
