use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers (running
/// statistics, input normalisation).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Integrity(format!("missing buffer {name}")))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Kaiming-uniform weight with zero bias for a layer with `fan_in` inputs.
    pub fn init_layer(
        &mut self,
        prefix: &str,
        weight_shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = weight_shape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::new(weight_shape, w).expect("shape"),
        );
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[weight_shape[0]]));
    }

    /// Register every parameter as a differentiable leaf on `graph`.
    pub fn bind(&self, graph: &Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), graph.param(v.clone())))
                .collect(),
        }
    }
}

impl ParamStore {
    /// Register every parameter as a constant; nothing is recorded for
    /// backpropagation. Used for inference.
    pub fn bind_frozen(&self, graph: &Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameters bound to one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))
    }

    /// Gradients for every bound parameter; parameters the loss does not
    /// depend on get zero tensors.
    pub fn gradients(
        &self,
        graph: &Graph,
        grads: &mut Gradients,
    ) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(&graph.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}
