use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// RMSProp without momentum: each parameter is scaled by a running RMS of its
/// own gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            square_avg: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.square_avg
    }

    pub fn set_state(&mut self, state: BTreeMap<String, Tensor>) {
        self.square_avg = state;
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Integrity(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let sq = self
                .square_avg
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((w, s), gv) in p.data_mut().iter_mut().zip(sq.data_mut()).zip(g.data()) {
                *s = self.alpha * *s + (1.0 - self.alpha) * gv * gv;
                *w -= self.lr * gv / (s.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
