//! Named parameter storage and per-forward binding onto a tape.

use std::cell::RefCell;

use dualpaint_autograd::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Which sub-model a parameter belongs to; training stages freeze by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Encoder,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, group: Group, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.add(name, group, Tensor::from_vec(data, shape).expect("shape"))
    }

    /// Copies an existing parameter under a new name and group.
    pub fn duplicate(&mut self, src: ParamId, name: impl Into<String>, group: Group) -> ParamId {
        let v = self.params[src.0].value.clone();
        self.add(name, group, v)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count of a group.
    pub fn count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies of every value in `group`, in store order.
    pub fn snapshot(&self, group: Group) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.clone())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Adds Gaussian noise of scale `std` to every parameter of `group`.
    pub fn perturb(&mut self, group: Group, std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            for v in p.value.data_mut() {
                *v += T::from_f64(dist.sample(rng));
            }
        }
    }
}

/// Binds store parameters onto a tape lazily, one leaf per parameter.
///
/// Parameters of trainable groups become gradient-tracking leaves; all
/// others are constants and never receive gradients.
pub struct Binder<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    trainable: Vec<Group>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, trainable: &[Group]) -> Self {
        Self {
            tape,
            store,
            trainable: trainable.to_vec(),
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binder with every parameter frozen.
    pub fn frozen(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self::new(tape, store, &[])
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    pub fn trainable(&self) -> &[Group] {
        &self.trainable
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = if self.trainable.contains(&param.group) {
            self.tape.leaf(&param.value.clone().with_grad())
        } else {
            self.tape.constant(&param.value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after a backward pass.
    pub fn gradients(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    /// L2 norm of the gradients that reached parameters of `group`.
    pub fn grad_norm(&self, group: Group) -> f64 {
        self.gradients()
            .iter()
            .filter(|(id, _)| self.store.get(*id).group == group)
            .flat_map(|(_, g)| g.iter().map(|v| v.to_f64() * v.to_f64()))
            .sum::<f64>()
            .sqrt()
    }
}
