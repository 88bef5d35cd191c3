use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::Graph;
use crate::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter is optimized under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// GRU, its embeddings, the FiLM generator and the whole conv path.
    Film,
    /// Transformer embedding tables and encoder layers.
    Encoder,
    /// Bilinear affinity map and the fusion head.
    CoAttention,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Film, ParamGroup::Encoder, ParamGroup::CoAttention];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Film => "film",
            ParamGroup::Encoder => "encoder",
            ParamGroup::CoAttention => "coattention",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    value: Rc<Tensor>,
    grad: Vec<f64>,
    group: ParamGroup,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }
}

/// Owns every trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let grad = vec![0.0; value.numel()];
        self.params.push(Param {
            name,
            value: Rc::new(value),
            grad,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Copy-on-write access; cheap once no graph holds the value.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds the gradients of every parameter leaf in `graph` into the store.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, grad) in graph.param_grads() {
            for (acc, g) in self.params[id.0].grad.iter_mut().zip(grad) {
                *acc += g;
            }
        }
    }

    /// Scales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        super::clip_global_norm(self.params.iter_mut().map(|p| p.grad.as_mut_slice()), max_norm)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Snapshot of all parameter values, in store order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| (*p.value).clone()).collect()
    }

    /// Restores values captured by [`ParamStore::snapshot`].
    pub fn restore(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.params.len(), "snapshot from a different store");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "snapshot shape mismatch for {}", p.name);
            p.value = Rc::new(v.clone());
        }
    }
}

impl Param {
    pub(crate) fn update(&mut self) -> (&mut Tensor, &[f64]) {
        (Rc::make_mut(&mut self.value), &self.grad)
    }
}
