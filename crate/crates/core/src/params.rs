//! Named parameter storage, deterministic initialization, and tape binding.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Which phase last produced a parameter's values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Init,
    Stage0,
    Stage1,
    Stage2,
}

impl Provenance {
    pub fn for_stage(stage: u8) -> Self {
        match stage {
            0 => Provenance::Stage0,
            1 => Provenance::Stage1,
            _ => Provenance::Stage2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// FNV-1a; stable across platforms and releases.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Initializes a tensor from `(seed, name)` alone, so adding or removing
/// other parameters never changes this one.
pub fn init_tensor<T: Scalar>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            Tensor::randn(shape, std, &mut rng)
        }
    }
}

/// Ordered, name-indexed parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, provenance: Provenance) {
        if let Some(&i) = self.index.get(name) {
            self.params[i].value = value;
            self.params[i].provenance = provenance;
            return;
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            provenance,
        });
    }

    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        self.insert(name, init_tensor(seed, name, shape, init), Provenance::Init);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 of the little-endian buffer of one parameter.
    pub fn digest(&self, name: &str) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.get(name)?.to_le_bytes()).into())
    }

    /// Puts every parameter on the tape; `trainable(name)` decides which
    /// ones receive gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'a> {
        let mut vars = HashMap::with_capacity(self.params.len());
        for p in &self.params {
            let v = tape.leaf(p.value.clone(), trainable(&p.name));
            vars.insert(p.name.as_str(), v);
        }
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound<'a> {
    vars: HashMap<&'a str, Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (*k, *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let a: Tensor<f64> = init_tensor(3, "w", &[2, 2], Init::Normal(1.0));
        let b: Tensor<f64> = init_tensor(3, "w", &[2, 2], Init::Normal(1.0));
        let c: Tensor<f64> = init_tensor(3, "v", &[2, 2], Init::Normal(1.0));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
