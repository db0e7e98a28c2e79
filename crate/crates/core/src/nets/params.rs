use std::cell::RefCell;
use std::collections::HashMap;

use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use crate::rng::Rng;
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

/// A named tensor. Batch-norm running statistics are stored as
/// non-trainable parameters so that they travel with checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered parameters of one model. Indices are stable for the lifetime of
/// the model and are what layers refer to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        self.params.len() - 1
    }

    /// Fan-in scaled uniform initialisation, `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> usize {
        let bound = gain / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, Tensor::from_vec(shape, data), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.params[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Feeds `name:shape` of every entry, in order, to `hasher`.
    pub fn hash_layout(&self, hasher: &mut Sha256) {
        for p in &self.params {
            hasher.update(format!("{}:{:?};", p.name, p.value.shape()).as_bytes());
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Exponential moving update of running statistics.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>, momentum: f64) {
        let mom = T::lit(momentum);
        let keep = T::one() - mom;
        for u in updates {
            for (idx, batch) in [(u.mean_idx, u.mean), (u.var_idx, u.var)] {
                let run = self.params[idx].value.data_mut();
                for (r, &b) in run.iter_mut().zip(batch.data()) {
                    *r = keep * *r + mom * b;
                }
            }
        }
    }
}

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean_idx: usize,
    pub var_idx: usize,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Whether batch-norm layers use batch statistics or their running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a model's parameters to a tape for one forward/backward pass.
/// Each parameter becomes a single leaf no matter how often it is used.
pub struct Bind<'t, 'm, T: Element> {
    tape: &'t Tape<T>,
    store: &'m ParamStore<T>,
    trainable: bool,
    mode: Mode,
    leaves: RefCell<Vec<Option<Var<'t, T>>>>,
    stats: RefCell<Vec<StatUpdate<T>>>,
}

impl<'t, 'm, T: Element> Bind<'t, 'm, T> {
    pub fn new(tape: &'t Tape<T>, store: &'m ParamStore<T>, trainable: bool, mode: Mode) -> Self {
        Self {
            tape,
            store,
            trainable,
            mode,
            leaves: RefCell::new(vec![None; store.len()]),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'m ParamStore<T> {
        self.store
    }

    pub fn var(&self, i: usize) -> Var<'t, T> {
        if let Some(v) = self.leaves.borrow()[i] {
            return v;
        }
        let p = self.store.get(i);
        let v = self.tape.leaf(p.value.clone(), self.trainable && p.trainable);
        self.leaves.borrow_mut()[i] = Some(v);
        v
    }

    pub(crate) fn record_stats(&self, update: StatUpdate<T>) {
        self.stats.borrow_mut().push(update);
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    /// Gradient for every parameter index (None when the parameter is
    /// frozen or did not take part in the computation).
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.leaves
            .borrow()
            .iter()
            .map(|leaf| leaf.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
