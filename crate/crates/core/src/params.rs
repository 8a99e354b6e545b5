//! Flat registry of named weight tensors. Modules hold [`ParamId`] handles;
//! the optimizer, checkpointing, and the gradient oracle iterate the store.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Element, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<E> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<E>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Marks every entry trainable (used when encoders are unfrozen).
    pub fn set_all_trainable(&mut self) {
        for e in &mut self.entries {
            e.trainable = true;
        }
    }

    /// Replaces tensor contents by name; dims must match. Used by
    /// checkpoint loading.
    pub fn load_named(&mut self, name: &str, data: Tensor<E>) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter `{name}` in checkpoint")))?;
        if e.tensor.dims() != data.dims() {
            return Err(Error::Shape {
                op: "load_named",
                lhs: e.tensor.dims().to_vec(),
                rhs: data.dims().to_vec(),
                detail: format!("checkpoint tensor `{name}` has wrong dims"),
            });
        }
        e.tensor = data;
        Ok(())
    }

    /// Precision conversion preserving names and trainability.
    pub fn convert<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), tensor: e.tensor.convert(), trainable: e.trainable })
                .collect(),
        }
    }
}

/// Linear layer handle: `y = x W + b` with W `[in, out]`, b `[out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Symmetric uniform init with bound `1/sqrt(in_dim)`; zero bias.
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut SplitMix64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
    ) -> Linear {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[in_dim, out_dim], bound, rng), trainable);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]), trainable);
        Linear { w, b }
    }
}

/// Layer-norm parameter pair (gamma = 1, beta = 0 at init).
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize, trainable: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], E::ONE), trainable);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), trainable);
        LayerNormParams { gamma, beta }
    }
}
