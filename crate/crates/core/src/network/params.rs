use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces every value with the same-named, same-shaped tensor from `other`.
    pub fn load_from(&mut self, other: &[(String, Array2<f64>)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            let id = self.by_name(name).ok_or_else(|| {
                Error::ConfigMismatch(format!("unknown parameter tensor `{name}`"))
            })?;
            if self.values[id.0].dim() != value.dim() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    self.values[id.0].dim(),
                    value.dim()
                )));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }
}

/// Weight and bias of one fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Glorot-uniform initializer over a deterministic stream.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Array2<f64> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_fn((fan_in, fan_out), |_| self.rng.random_range(-a..a))
    }

    pub fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.glorot(fan_in, fan_out);
        Linear {
            weight: store.insert(format!("{name}.weight"), w),
            bias: store.insert(format!("{name}.bias"), Array2::zeros((1, fan_out))),
        }
    }

    /// A layer over `[a | b]` stored as two weight blocks sharing one bias.
    /// Initialized as if it were a single `(fan_a + fan_b) x fan_out` matrix.
    pub fn split_linear(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        fan_a: usize,
        fan_b: usize,
        fan_out: usize,
    ) -> SplitLinear {
        let w = self.glorot(fan_a + fan_b, fan_out);
        let wa = w.slice(ndarray::s![..fan_a, ..]).to_owned();
        let wb = w.slice(ndarray::s![fan_a.., ..]).to_owned();
        SplitLinear {
            weight_a: store.insert(format!("{name}.weight_a"), wa),
            weight_b: store.insert(format!("{name}.weight_b"), wb),
            bias: store.insert(format!("{name}.bias"), Array2::zeros((1, fan_out))),
        }
    }
}

/// A fully connected layer applied to a concatenation `[a | b]`, kept as two
/// weight blocks so that a broadcast operand is multiplied only once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitLinear {
    pub weight_a: ParamId,
    pub weight_b: ParamId,
    pub bias: ParamId,
}
