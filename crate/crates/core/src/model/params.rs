use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PatError, Result};
use crate::tensor::{adam_step, AdamConfig, AdamState, Dropout, Grads, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors in registration order.
///
/// Names are dotted paths such as `encoder.block0.attn.wq`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Enables or disables training for every parameter whose name starts
    /// with one of `prefixes`.
    pub fn set_trainable(&mut self, prefixes: &[&str], on: bool) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                t.set_requires_grad(on);
            }
        }
    }

    /// Overwrites a parameter's values from `src`, which must match its shape.
    pub fn load(&mut self, name: &str, src: &Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| PatError::Checkpoint(format!("unexpected tensor {name:?}")))?;
        let dst = &mut self.tensors[id.0];
        if dst.shape() != src.shape() {
            return Err(PatError::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
        Ok(())
    }

    /// Adds `scale ·` the parameter gradients of one pass into the stored
    /// gradients.
    pub fn accumulate(&mut self, grads: &Grads, scale: f32) -> Result<()> {
        for (id, g) in grads.params() {
            self.tensors[id].accumulate_grad(g, scale)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Adam over every trainable tensor of a [`ParamStore`].
pub struct Optimizer {
    states: Vec<Option<AdamState>>,
    config: AdamConfig,
}

impl Optimizer {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Optimizer { states: vec![None; store.len()], config }
    }

    /// Steps every parameter holding a gradient; others are left alone.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (i, t) in store.tensors.iter_mut().enumerate() {
            if !t.requires_grad() || t.grad().is_none() {
                continue;
            }
            let state = self.states[i].get_or_insert_with(|| AdamState::new(t.len(), self.config));
            adam_step(t, state)?;
        }
        Ok(())
    }
}

/// Seeded weight initializer: normal(0, 0.02) projections, zero biases,
/// unit norm gains.
pub struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
}

impl Init {
    pub const STD: f32 = 0.02;

    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, Self::STD).unwrap() }
    }

    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("positive init shape")
    }
}

/// One forward pass: a fresh tape over a borrowed parameter store.
pub struct Pass<'s> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    pub dropout: Option<Dropout>,
}

impl<'s> Pass<'s> {
    pub fn new(store: &'s ParamStore, dropout: Option<Dropout>) -> Self {
        Pass { tape: Tape::new(), store, dropout }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(id.0, self.store.get(id))
    }
}
