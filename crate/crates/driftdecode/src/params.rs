//! Named parameter arena shared by models, optimizer, EMA, and checkpoints.

use crate::graph::{Graph, Var};
use crate::rng::{stream, Domain};
use crate::tensor::{Elem, Tensor};
use rand_distr::{Distribution, StandardNormal};

/// Handle to one tensor in a [`Params`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat, ordered collection of named parameter tensors. Order is the
/// creation order, which is deterministic for a given model configuration
/// and is what the optimizer, the EMA shadow, and checkpoints key on.
pub struct Params<T: Elem> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    seed: u64,
}

impl<T: Elem> Params<T> {
    pub fn new(seed: u64) -> Self {
        Params { names: Vec::new(), tensors: Vec::new(), seed }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) {
        assert_eq!(self.tensors[id.0].shape(), t.shape(), "param shape change");
        self.tensors[id.0] = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight drawn from N(0, gain/fan_in), seeded by the parameter index so
    /// construction order alone fixes the initialization.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
    ) -> ParamId {
        let idx = self.tensors.len() as u64;
        let mut rng = stream(self.seed, Domain::Init, idx, 0);
        let std = (gain / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(z * std)
            })
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Deep copy (for EMA shadows).
    pub fn clone_tensors(&self) -> Vec<Tensor<T>> {
        self.tensors.clone()
    }

    /// Same names and order, different tensors (e.g. the EMA shadow).
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Params<T> {
        assert_eq!(tensors.len(), self.tensors.len());
        for (a, b) in tensors.iter().zip(&self.tensors) {
            assert_eq!(a.shape(), b.shape(), "replacement tensor shape mismatch");
        }
        Params { names: self.names.clone(), tensors, seed: self.seed }
    }
}

/// Per-graph binding of a parameter arena: every parameter becomes a leaf
/// (trainable) or a constant (frozen / evaluation).
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn bind<T: Elem>(params: &Params<T>, g: &mut Graph<T>, trainable: bool) -> Binding {
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in parameter order (None where a parameter was unused).
    pub fn grads<'g, T: Elem>(&self, g: &'g Graph<T>) -> Vec<Option<&'g Tensor<T>>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}
