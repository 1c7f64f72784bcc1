use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is, independent of which model owns it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Linear weights and embedding tables.
    Weight,
    /// Additive biases, including layer-norm shifts.
    Bias,
    /// Layer-norm gains.
    Gain,
    /// Static prompt tokens.
    Prompt,
    /// Rows of the shared prompt basis.
    Basis,
    /// Prompt-synthesis encoder/decoder weights.
    Adapter,
    /// Context modeling recurrent network and its heads.
    Cmm,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub group: ParamGroup,
    /// Part of the pretrained dual encoder (as opposed to an adaptation add-on).
    pub backbone: bool,
    pub trainable: bool,
}

/// Named parameter arrays with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        value: Tensor<S>,
        group: ParamGroup,
        backbone: bool,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            group,
            backbone,
            trainable: false,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<S> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<S>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&ParamEntry<S>) -> bool) {
        for e in &mut self.entries {
            e.trainable = pred(e);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor<S>)>) {
        for (id, g) in grads {
            self.entries[id.0].grad.add_assign(&g);
        }
    }

    /// Total element count over entries matching `pred`.
    pub fn count_where(&self, pred: impl Fn(&ParamEntry<S>) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names and exact value bits of entries matching `pred`.
    pub fn checksum_where(&self, pred: impl Fn(&ParamEntry<S>) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| pred(e)) {
            h.update(e.name.as_bytes());
            for &v in e.value.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies values of every same-named, same-shaped entry from `other`.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<usize> {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(&id) = other.by_name.get(&e.name) {
                let src = &other.entries[id.0].value;
                if src.shape() != e.value.shape() {
                    return Err(Error::shape("load_from", e.value.shape(), src.shape()));
                }
                e.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// A forward pass in progress: a fresh graph plus lazily bound parameter
/// leaves. Trainable parameters become differentiable leaves, everything else
/// constants.
pub struct Session<'s, S: Real> {
    pub g: Graph<S>,
    store: &'s ParamStore<S>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'s, S: Real> Session<'s, S> {
    pub fn new(store: &'s ParamStore<S>) -> Self {
        Self::with_graph(store, Graph::new(), true)
    }

    /// Evaluation session: no parameter is differentiable.
    pub fn inference(store: &'s ParamStore<S>) -> Self {
        Self::with_graph(store, Graph::new(), false)
    }

    pub fn with_graph(store: &'s ParamStore<S>, g: Graph<S>, grad_enabled: bool) -> Self {
        Self {
            g,
            store,
            bound: vec![None; store.len()],
            grad_enabled,
        }
    }

    pub fn store(&self) -> &'s ParamStore<S> {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Leaf for parameter `id`, bound once per session.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = self
            .g
            .leaf(e.value.clone(), self.grad_enabled && e.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<S>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.g.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}
