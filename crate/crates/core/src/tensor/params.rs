use std::collections::HashMap;

use rand::Rng;

use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to. Each group is stepped with its own
/// learning rate and never touches another group's moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    TextEncoder,
    Generator,
    /// Discriminator set of stage 0 or 1.
    Discriminator(u8),
}

/// A trainable tensor plus its gradient and Adam state.
#[derive(Debug, Clone)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

/// Named collection of parameters. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.clone(),
            group,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            value,
            step_count: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| sc(rng.random_range(-bound..bound))).collect();
        self.add(name, group, Tensor::new(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: Group, shape: &[usize]) -> Result<ParamId> {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `scale * g` into the gradient buffers, in id order.
    pub fn accumulate(&mut self, grads: &super::Gradients<T>, scale: T) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a = *a + scale * *b;
            }
        }
    }

    /// Copy of this store in another precision (values, grads and moments).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    adam_m: p.adam_m.cast(),
                    adam_v: p.adam_v.cast(),
                    step_count: p.step_count,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Squared L2 norm of the gradients of one group.
    pub fn grad_norm_sq(&self, group: Group) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64().unwrap();
                g * g
            })
            .sum()
    }
}
