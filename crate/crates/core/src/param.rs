//! Parameter registry shared by every model in a system.
//!
//! Models hold [`ParamId`]s into a [`ParamStore`]; the store owns values, gradient
//! buffers and trainable flags, which gives freezing, optimisation and
//! checkpointing a single census to work over.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Sasrec,
    Mapping,
    Lora,
    LlmBase,
    Baseline,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Sasrec,
        Component::Mapping,
        Component::Lora,
        Component::LlmBase,
        Component::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Sasrec => "sasrec",
            Component::Mapping => "mapping",
            Component::Lora => "lora",
            Component::LlmBase => "llm_base",
            Component::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::checkpoint("component", format!("unknown component `{s}`")))
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub component: Component,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    reads: Vec<AtomicU64>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            reads: self.params.iter().map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, component: Component, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            component,
            value,
            grad,
            trainable: true,
        });
        self.reads.push(AtomicU64::new(0));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    /// Value read on behalf of a forward pass; counted for access audits.
    pub fn read(&self, id: ParamId) -> &Tensor {
        self.reads[id.0].fetch_add(1, Ordering::Relaxed);
        &self.params[id.0].value
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_of(&self, component: Component) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.component == component)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn components(&self) -> Vec<Component> {
        let mut out: Vec<Component> = self.params.iter().map(|p| p.component).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn set_component_trainable(&mut self, component: Component, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.component == component) {
            p.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grads` into the gradient buffers of trainable parameters.
    pub fn accumulate(&mut self, grads: &Gradients, scale: Real) {
        for (i, g) in grads.grads.iter().enumerate() {
            if let (Some(g), Some(p)) = (g, self.params.get_mut(i)) {
                if !p.trainable {
                    continue;
                }
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += scale * src;
                }
            }
        }
    }

    /// L2 norm of the gradient buffers of one component.
    pub fn grad_norm(&self, component: Component) -> Real {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.grad.sq_norm())
            .sum::<Real>()
            .sqrt()
    }

    pub fn trainable_grad_norm(&self) -> Real {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sq_norm())
            .sum::<Real>()
            .sqrt()
    }

    pub fn num_scalars(&self, component: Option<Component>) -> usize {
        self.params
            .iter()
            .filter(|p| component.is_none_or(|c| p.component == c))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn read_count(&self, id: ParamId) -> u64 {
        self.reads[id.0].load(Ordering::Relaxed)
    }

    /// Total forward reads of a component's parameters since the last reset.
    pub fn component_reads(&self, component: Component) -> u64 {
        self.iter()
            .filter(|(_, p)| p.component == component)
            .map(|(id, _)| self.read_count(id))
            .sum()
    }

    pub fn reset_read_counts(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    /// Snapshot of every value, used for freeze audits.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }
}

/// Parameter gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn with_len(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add(&mut self, id: ParamId, g: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds another set of gradients into this one, in index order.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g.clone());
            }
        }
    }
}
