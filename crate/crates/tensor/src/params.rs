use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// One named tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub trainable: bool,
    /// How many times the model applies this tensor. Weight-tied layers are
    /// stored once but counted once per use.
    pub uses: usize,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: BTreeMap<String, Param<T>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        self.insert_shared(name, value, trainable, 1)
    }

    pub fn insert_shared(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
        uses: usize,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.entries.insert(
            name,
            Param {
                value,
                trainable,
                uses,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sets the trainable flag of every entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in &mut self.entries {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                            uses: p.uses,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Sub-set of entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn count(&self) -> ParamCount {
        param_count(self)
    }
}

/// Element counts split by the trainable flag. Shared tensors count once
/// per use.
pub fn param_count<T: Real>(params: &ParamSet<T>) -> ParamCount {
    let mut c = ParamCount::default();
    for (_, p) in params.iter() {
        let n = p.value.numel() * p.uses;
        if p.trainable {
            c.trainable += n;
        } else {
            c.frozen += n;
        }
    }
    c.total = c.trainable + c.frozen;
    c
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads<T = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// SplitMix64 finaliser; used to derive independent seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive combination of several seed components.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_F00D_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// FNV-1a over the UTF-8 bytes of `name`.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kaiming-uniform initialisation, bound `sqrt(6 / fan_in)`, drawn from an
/// RNG keyed by `(seed, name)`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = seeded_rng(derive_seed(&[seed, name_hash(name)]));
    Tensor::uniform(shape, -bound, bound, &mut rng)
}
