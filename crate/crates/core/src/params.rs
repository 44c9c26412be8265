//! Named parameter storage with explicit sharing.
//!
//! A slot is one backing tensor plus its gradient buffer. Several names may
//! alias the same slot; that is how the two encoder streams share layer
//! parameters: writes through either name are reads through the other, and
//! gradients from every aliasing site accumulate into one buffer before a
//! single optimizer update.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use hashbrown::HashMap;
use rand_chacha::ChaCha8Rng;

use crate::rng::truncated_normal;
use crate::tensor::{Real, Tensor};

/// Stable handle to one slot. Indices are assigned in registration order,
/// which also fixes the checkpoint blob layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamError {
    DuplicateName(String),
    UnknownName(String),
}

impl fmt::Display for ParamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamError::DuplicateName(n) => write!(f, "parameter name {n:?} already registered"),
            ParamError::UnknownName(n) => write!(f, "no parameter named {n:?}"),
        }
    }
}

impl core::error::Error for ParamError {}

struct Slot<T> {
    /// Canonical storage key; doubles as the sharing-group key when the
    /// slot has more than one name.
    key: String,
    names: Vec<String>,
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// All learnable tensors of a model, keyed by name, with aliasing.
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
    by_name: HashMap<String, SlotId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a new slot under `name`.
    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<SlotId, ParamError> {
        if self.by_name.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        let id = SlotId(self.slots.len());
        let grad = Tensor::zeros(value.shape());
        self.slots.push(Slot {
            key: name.to_string(),
            names: alloc::vec![name.to_string()],
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds `alias` as another name for an existing slot — the sharing
    /// mechanism.
    pub fn alias(&mut self, alias: &str, id: SlotId) -> Result<SlotId, ParamError> {
        if self.by_name.contains_key(alias) {
            return Err(ParamError::DuplicateName(alias.to_string()));
        }
        self.slots[id.0].names.push(alias.to_string());
        self.by_name.insert(alias.to_string(), id);
        Ok(id)
    }

    pub fn lookup(&self, name: &str) -> Result<SlotId, ParamError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::UnknownName(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    #[inline]
    pub fn value(&self, id: SlotId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: SlotId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: SlotId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: SlotId) -> &mut Tensor<T> {
        &mut self.slots[id.0].grad
    }

    /// Canonical key of the slot (the sharing-group key).
    pub fn key(&self, id: SlotId) -> &str {
        &self.slots[id.0].key
    }

    /// All names aliasing the slot, registration order.
    pub fn names(&self, id: SlotId) -> &[String] {
        &self.slots[id.0].names
    }

    /// Whether the slot is referenced through more than one name.
    pub fn is_shared(&self, id: SlotId) -> bool {
        self.slots[id.0].names.len() > 1
    }

    pub fn slot_ids(&self) -> impl Iterator<Item = SlotId> {
        (0..self.slots.len()).map(SlotId)
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.fill(T::zero());
        }
    }

    /// Total number of scalar parameters; every slot counted exactly once
    /// regardless of how many names alias it.
    pub fn total_params(&self) -> u64 {
        self.slots.iter().map(|s| s.value.len() as u64).sum()
    }

    /// Accumulates `delta` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: SlotId, delta: &Tensor<T>) {
        self.slots[id.0].grad.add_assign(delta);
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Registers a freshly initialized weight matrix: truncated normal with the
/// given std, two-sigma bounds.
pub fn register_normal<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    std: f64,
    rng: &mut ChaCha8Rng,
) -> SlotId {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = truncated_normal(rng, std);
    }
    store.register(name, t).expect("layout registers each name once")
}

/// Registers a constant-filled tensor (zeros for biases, ones for layer
/// norm gains).
pub fn register_const<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    value: f64,
) -> SlotId {
    let mut t = Tensor::zeros(shape);
    t.fill(T::from_f64(value));
    store.register(name, t).expect("layout registers each name once")
}
