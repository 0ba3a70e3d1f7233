//! Named parameter collections keyed by hierarchical paths such as
//! `context_network/block_0/ff1/w1`.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub type TensorMap = BTreeMap<String, Tensor>;

/// Ordered list of `(path, shape)` describing a model without holding any
/// parameter values. Large configurations are counted through this.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
    buffers: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal scaled by `1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, path: impl Into<String>, shape: &[usize], init: Init) {
        self.entries.push((path.into(), shape.to_vec(), init));
    }

    /// Non-trainable state (e.g. batch-norm running statistics). Stored and
    /// checkpointed with the parameters but excluded from parameter counts.
    pub fn push_buffer(&mut self, path: impl Into<String>, shape: &[usize], init: Init) {
        let path = path.into();
        self.buffers.push(path.clone());
        self.entries.push((path, shape.to_vec(), init));
    }

    pub fn is_buffer(&self, path: &str) -> bool {
        self.buffers.iter().any(|b| b == path)
    }

    pub fn extend(&mut self, other: Layout) {
        self.entries.extend(other.entries);
        self.buffers.extend(other.buffers);
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: Layout) {
        for (p, s, i) in other.entries {
            self.entries.push((format!("{prefix}/{p}"), s, i));
        }
        for b in other.buffers {
            self.buffers.push(format!("{prefix}/{b}"));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries
            .iter()
            .map(|(p, s, _)| (p.as_str(), s.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trainable scalar count (buffers excluded).
    pub fn param_count(&self) -> u64 {
        self.count_with_prefix("")
    }

    pub fn count_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(p, _, _)| p.starts_with(prefix) && !self.is_buffer(p))
            .map(|(_, s, _)| s.iter().product::<usize>() as u64)
            .sum()
    }

    pub fn shape_of(&self, path: &str) -> Option<&[usize]> {
        self.entries
            .iter()
            .find(|(p, _, _)| p == path)
            .map(|(_, s, _)| s.as_slice())
    }

    /// Materializes every entry. Each parameter draws from its own stream so
    /// values do not depend on layout order.
    pub fn instantiate(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for (path, shape, init) in &self.entries {
            let mut rng = SeedRng::derive(seed, path);
            let t = match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
                Init::FanIn(fan_in) => {
                    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(shape, |_| rng.truncated_normal(std))
                }
                Init::Normal(std) => Tensor::from_fn(shape, |_| rng.truncated_normal(std)),
            };
            store.insert(path.clone(), t);
        }
        store
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: TensorMap,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: TensorMap) -> Self {
        ParamStore { tensors }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| NumError::Missing(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| NumError::Missing(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor> {
        self.tensors.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    pub fn as_map(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn into_map(self) -> TensorMap {
        self.tensors
    }

    /// Restriction to the paths whose prefix satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.tensors
            .iter()
            .map(|(k, v)| match other.tensors.get(k) {
                Some(o) if o.shape() == v.shape() => v.max_abs_diff(o),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instantiate_is_order_independent() {
        let mut a = Layout::new();
        a.push("x/w", &[3, 4], Init::FanIn(3));
        a.push("y/w", &[2], Init::Normal(0.1));
        let mut b = Layout::new();
        b.push("y/w", &[2], Init::Normal(0.1));
        b.push("x/w", &[3, 4], Init::FanIn(3));
        assert_eq!(a.instantiate(5), b.instantiate(5));
        assert_eq!(a.param_count(), 14);
        assert_eq!(a.count_with_prefix("x/"), 12);
    }
}
